//! Prototype construction and distance-softmax classification.
//!
//! Class probabilities are `softmax_c(−‖f(x) − p_c‖² / τ)` over the episode's
//! prototypes (raw or transformed). The distance is squared Euclidean.

use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::numerics::{argmin_unchecked, softmax_unchecked, sq_dist, Matrix, RngState, Vector};
use crate::params::{join, Params};

pub const DEFAULT_TEMPERATURE: f64 = 64.0;

/// Ordered per-class prototypes, one row per episode class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    protos: Matrix,
}

impl PrototypeSet {
    pub fn new(protos: Matrix) -> Result<Self> {
        if protos.rows() == 0 || protos.cols() == 0 {
            return Err(Error::invalid("prototype set needs at least one non-empty prototype"));
        }
        if !protos.is_finite() {
            return Err(Error::NonFinite("prototype set".into()));
        }
        Ok(PrototypeSet { protos })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        PrototypeSet::new(Matrix::from_rows(rows)?)
    }

    pub(crate) fn from_matrix_unchecked(protos: Matrix) -> Self {
        PrototypeSet { protos }
    }

    pub fn way(&self) -> usize {
        self.protos.rows()
    }

    pub fn dim(&self) -> usize {
        self.protos.cols()
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        self.protos.row(class)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.protos
    }

    pub fn into_matrix(self) -> Matrix {
        self.protos
    }

    /// Row `i` of the result is prototype `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> PrototypeSet {
        PrototypeSet {
            protos: self.protos.select_rows(order),
        }
    }

    /// Copy with prototype `class` replaced by `feature`.
    pub fn replaced(&self, class: usize, feature: &[f64]) -> PrototypeSet {
        let mut protos = self.protos.clone();
        protos.row_mut(class).copy_from_slice(feature);
        PrototypeSet { protos }
    }

    /// Copy with `feature` appended as an extra member.
    pub fn appended(&self, feature: &[f64]) -> PrototypeSet {
        PrototypeSet {
            protos: self.protos.with_row(feature),
        }
    }
}

/// Feature extractor applied to raw inputs before prototype construction.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderSpec {
    Identity,
    /// Leaky-rectifier MLP, `widths = [in, hidden.., out]`.
    Mlp(Mlp),
}

impl EncoderSpec {
    pub fn mlp(widths: &[usize], rng: &mut RngState) -> Result<Self> {
        Ok(EncoderSpec::Mlp(Mlp::init(widths, rng)?))
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            EncoderSpec::Identity => EncoderSpec::Identity,
            EncoderSpec::Mlp(m) => EncoderSpec::Mlp(m.zeros_like()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EncoderSpec::Identity => "identity",
            EncoderSpec::Mlp(_) => "mlp",
        }
    }

    /// Required input width, if fixed.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            EncoderSpec::Identity => None,
            EncoderSpec::Mlp(m) => Some(m.input_dim()),
        }
    }

    /// Embedding width produced for inputs of width `input`.
    pub fn output_dim(&self, input: usize) -> usize {
        match self {
            EncoderSpec::Identity => input,
            EncoderSpec::Mlp(m) => m.output_dim(),
        }
    }
}

impl Params for EncoderSpec {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        if let EncoderSpec::Mlp(m) = self {
            m.visit(&join(prefix, "mlp"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        if let EncoderSpec::Mlp(m) = self {
            m.visit_mut(f);
        }
    }
}

pub fn encode(enc: &EncoderSpec, x: &[f64]) -> Result<Vector> {
    match enc {
        EncoderSpec::Identity => Vector::new(x.to_vec()),
        EncoderSpec::Mlp(m) => {
            if x.len() != m.input_dim() {
                return Err(Error::dim("encoder input", m.input_dim(), x.len()));
            }
            Vector::new(m.forward(x))
        }
    }
}

/// Softmax output over episode classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities {
    probs: Vec<f64>,
}

impl ClassProbabilities {
    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Most probable class, lowest index on ties.
    pub fn predicted(&self) -> usize {
        crate::numerics::argmax_unchecked(&self.probs)
    }

    pub fn max(&self) -> f64 {
        self.probs[self.predicted()]
    }
}

/// Mean of the encoded supports of each class.
pub fn compute_prototypes(enc: &EncoderSpec, episode: &Episode) -> Result<PrototypeSet> {
    let encoded = EncodedEpisode::new(enc, episode)?;
    Ok(encoded.prototypes())
}

pub(crate) fn class_means(features: &Matrix, labels: &[usize], way: usize) -> Matrix {
    let mut sums = Matrix::zeros(way, features.cols());
    let mut counts = vec![0usize; way];
    for (row, &y) in features.iter_rows().zip(labels) {
        crate::numerics::axpy(sums.row_mut(y), 1.0, row);
        counts[y] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            let inv = 1.0 / n as f64;
            sums.row_mut(c).iter_mut().for_each(|v| *v *= inv);
        }
    }
    sums
}

pub(crate) fn logits_unchecked(query: &[f64], protos: &Matrix, temperature: f64) -> Vec<f64> {
    protos
        .iter_rows()
        .map(|p| -sq_dist(query, p) / temperature)
        .collect()
}

/// Distance-softmax class probabilities of `query` against `protos`.
pub fn classify(query: &[f64], protos: &PrototypeSet, temperature: f64) -> Result<ClassProbabilities> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if query.len() != protos.dim() {
        return Err(Error::dim("classify query", protos.dim(), query.len()));
    }
    let logits = logits_unchecked(query, protos.matrix(), temperature);
    Ok(ClassProbabilities {
        probs: softmax_unchecked(&logits),
    })
}

/// Nearest prototype and its squared distance.
pub fn nearest_prototype(query: &[f64], protos: &PrototypeSet) -> Result<(usize, f64)> {
    if query.len() != protos.dim() {
        return Err(Error::dim("nearest prototype query", protos.dim(), query.len()));
    }
    let d: Vec<f64> = protos
        .matrix()
        .iter_rows()
        .map(|p| sq_dist(query, p))
        .collect();
    let c = argmin_unchecked(&d);
    Ok((c, d[c]))
}

/// An episode pushed through the encoder once.
#[derive(Debug, Clone)]
pub struct EncodedEpisode {
    pub way: usize,
    pub supports: Matrix,
    pub support_labels: Vec<usize>,
    pub known: Matrix,
    pub known_labels: Vec<usize>,
    pub unknown: Matrix,
}

impl EncodedEpisode {
    pub fn new(enc: &EncoderSpec, episode: &Episode) -> Result<Self> {
        let encode_all = |xs: &[crate::episodes::LabeledExample], width: usize| -> Result<Matrix> {
            let mut m = Matrix::zeros(xs.len(), width);
            for (i, ex) in xs.iter().enumerate() {
                m.row_mut(i).copy_from_slice(&encode(enc, &ex.feature)?);
            }
            Ok(m)
        };
        if episode.supports.is_empty() {
            return Err(Error::invalid("episode has no supports"));
        }
        let width = enc.output_dim(episode.dim());
        Ok(EncodedEpisode {
            way: episode.way,
            supports: encode_all(&episode.supports, width)?,
            support_labels: episode.supports.iter().map(|e| e.class_id).collect(),
            known: encode_all(&episode.known_queries, width)?,
            known_labels: episode.known_queries.iter().map(|e| e.class_id).collect(),
            unknown: encode_all(&episode.unknown_queries, width)?,
        })
    }

    pub fn prototypes(&self) -> PrototypeSet {
        PrototypeSet::from_matrix_unchecked(class_means(&self.supports, &self.support_labels, self.way))
    }
}
