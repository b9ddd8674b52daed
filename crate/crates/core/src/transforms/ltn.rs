//! Learned blend of layer and instance normalization.
//!
//! A small generator maps the whole prototype set to a scalar `α(P) ∈ (0, 1)`
//! and the output is `γ (α LN̂(P) + (1 − α) IN̂(P)) + β`, where the hats are
//! the pre-affine normalizations.
//!
//! The generator applies two position-wise layers (D → 64 → 64) to every
//! prototype, mean-pools over the set, then maps 64 → 32 → 1 and squashes
//! with the logistic function. Position-wise layers are kernel-1 convolutions
//! over the stacked set, and pooling over members makes `α` order-free.

use crate::classifier::PrototypeSet;
use crate::error::{Error, Result};
use crate::mlp::Dense;
use crate::numerics::{leaky, leaky_grad, sigmoid, Matrix, RngState};
use crate::params::{join, Params};

use super::norm::{
    affine_backward, instance_standardize, instance_standardize_backward, layer_standardize,
    layer_standardize_backward,
};

/// Output widths of the four generator layers.
pub const GENERATOR_WIDTHS: [usize; 4] = [64, 64, 32, 1];

/// Layers after which the set is mean-pooled.
const POOL_AFTER: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightGenerator {
    layers: Vec<Dense>,
}

struct GeneratorTrace {
    /// Per member, pre-activations of the position-wise layers.
    member_pre: Vec<[Vec<f64>; POOL_AFTER]>,
    /// Per member, post-activations of the position-wise layers.
    member_post: Vec<[Vec<f64>; POOL_AFTER]>,
    pooled: Vec<f64>,
    z3: Vec<f64>,
    a3: Vec<f64>,
    alpha: f64,
}

impl WeightGenerator {
    pub fn init(dim: usize, rng: &mut RngState) -> Self {
        let mut layers = Vec::with_capacity(4);
        let mut input = dim;
        for w in GENERATOR_WIDTHS {
            layers.push(Dense::init(input, w, rng));
            input = w;
        }
        WeightGenerator { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.len() != GENERATOR_WIDTHS.len() {
            return Err(Error::dim("weight generator layers", GENERATOR_WIDTHS.len(), layers.len()));
        }
        for (l, &w) in layers.iter().zip(&GENERATOR_WIDTHS) {
            if l.output_dim() != w || l.bias.len() != w {
                return Err(Error::dim("weight generator width", w, l.output_dim()));
            }
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::dim("weight generator chaining", pair[0].output_dim(), pair[1].input_dim()));
            }
        }
        Ok(WeightGenerator { layers })
    }

    pub fn zeros_like(&self) -> Self {
        WeightGenerator {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    /// `α(P)` for a stacked prototype set.
    pub fn alpha(&self, p: &Matrix) -> f64 {
        self.trace(p).alpha
    }

    fn trace(&self, p: &Matrix) -> GeneratorTrace {
        let mut member_pre = Vec::with_capacity(p.rows());
        let mut member_post = Vec::with_capacity(p.rows());
        let mut pooled = vec![0.0; self.layers[POOL_AFTER - 1].output_dim()];
        for row in p.iter_rows() {
            let z1 = self.layers[0].apply(row);
            let a1: Vec<f64> = z1.iter().map(|&v| leaky(v)).collect();
            let z2 = self.layers[1].apply(&a1);
            let a2: Vec<f64> = z2.iter().map(|&v| leaky(v)).collect();
            for (s, v) in pooled.iter_mut().zip(&a2) {
                *s += v;
            }
            member_pre.push([z1, z2]);
            member_post.push([a1, a2]);
        }
        let n = p.rows() as f64;
        pooled.iter_mut().for_each(|v| *v /= n);
        let z3 = self.layers[2].apply(&pooled);
        let a3: Vec<f64> = z3.iter().map(|&v| leaky(v)).collect();
        let z4 = self.layers[3].apply(&a3)[0];
        GeneratorTrace {
            member_pre,
            member_post,
            pooled,
            z3,
            a3,
            alpha: sigmoid(z4),
        }
    }

    fn backward(&self, p: &Matrix, t: &GeneratorTrace, dalpha: f64, grad: &mut WeightGenerator) -> Matrix {
        let dz4 = [dalpha * t.alpha * (1.0 - t.alpha)];
        let mut da3 = self.layers[3].backward(&t.a3, &dz4, &mut grad.layers[3]);
        for (d, &z) in da3.iter_mut().zip(&t.z3) {
            *d *= leaky_grad(z);
        }
        let dpooled = self.layers[2].backward(&t.pooled, &da3, &mut grad.layers[2]);
        let n = p.rows() as f64;
        let mut dp = Matrix::zeros(p.rows(), p.cols());
        for c in 0..p.rows() {
            let mut dz2: Vec<f64> = dpooled.iter().map(|d| d / n).collect();
            for (d, &z) in dz2.iter_mut().zip(&t.member_pre[c][1]) {
                *d *= leaky_grad(z);
            }
            let mut dz1 = self.layers[1].backward(&t.member_post[c][0], &dz2, &mut grad.layers[1]);
            for (d, &z) in dz1.iter_mut().zip(&t.member_pre[c][0]) {
                *d *= leaky_grad(z);
            }
            let dx = self.layers[0].backward(p.row(c), &dz1, &mut grad.layers[0]);
            dp.row_mut(c).copy_from_slice(&dx);
        }
        dp
    }
}

impl Params for WeightGenerator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LtnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub generator: WeightGenerator,
}

impl LtnParams {
    pub fn init(dim: usize, eps: f64, rng: &mut RngState) -> Self {
        LtnParams {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            eps,
            generator: WeightGenerator::init(dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LtnParams {
            gamma: vec![0.0; self.gamma.len()],
            beta: vec![0.0; self.beta.len()],
            eps: self.eps,
            generator: self.generator.zeros_like(),
        }
    }

    pub(crate) fn validate(&self, dim: usize) -> Result<()> {
        if self.gamma.len() != dim {
            return Err(Error::dim("ltn gamma", dim, self.gamma.len()));
        }
        if self.beta.len() != dim {
            return Err(Error::dim("ltn beta", dim, self.beta.len()));
        }
        if self.generator.dim() != dim {
            return Err(Error::dim("ltn weight generator input", dim, self.generator.dim()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

impl Params for LtnParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "gamma"), &[self.gamma.len()], &self.gamma);
        f(&join(prefix, "beta"), &[self.beta.len()], &self.beta);
        self.generator.visit(&join(prefix, "generator"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.gamma);
        f(&mut self.beta);
        self.generator.visit_mut(f);
    }
}

fn blend(ln: &Matrix, inorm: &Matrix, alpha: f64) -> Matrix {
    let data = ln
        .as_slice()
        .iter()
        .zip(inorm.as_slice())
        .map(|(l, i)| alpha * l + (1.0 - alpha) * i)
        .collect();
    Matrix::from_vec(ln.rows(), ln.cols(), data).expect("shapes agree")
}

fn check(p: &PrototypeSet, params: &LtnParams) -> Result<()> {
    params.validate(p.dim())?;
    if p.way() < 2 {
        return Err(Error::InvalidArgument(format!(
            "ltn needs a set of at least 2 prototypes, got {}",
            p.way()
        )));
    }
    Ok(())
}

/// LTN with the generator bypassed and `alpha` supplied directly.
pub fn ltn_with_alpha(p: &PrototypeSet, params: &LtnParams, alpha: f64) -> Result<PrototypeSet> {
    check(p, params)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let (ln, _) = layer_standardize(p.matrix(), params.eps);
    let (inorm, _) = instance_standardize(p.matrix(), params.eps)?;
    let mixed = blend(&ln, &inorm, alpha);
    Ok(PrototypeSet::from_matrix_unchecked(super::norm::affine(
        &mixed,
        &params.gamma,
        &params.beta,
    )))
}

pub fn ltn_forward(p: &PrototypeSet, params: &LtnParams) -> Result<PrototypeSet> {
    check(p, params)?;
    ltn_with_alpha(p, params, params.generator.alpha(p.matrix()))
}

pub(crate) fn ltn_backward(p: &Matrix, params: &LtnParams, upstream: &Matrix) -> Result<(LtnParams, Matrix)> {
    let trace = params.generator.trace(p);
    let alpha = trace.alpha;
    let (ln, ln_inv) = layer_standardize(p, params.eps);
    let (inorm, in_inv) = instance_standardize(p, params.eps)?;
    let mixed = blend(&ln, &inorm, alpha);

    let mut grad = params.zeros_like();
    let dmixed = affine_backward(&mixed, &params.gamma, upstream, &mut grad.gamma, &mut grad.beta);
    let dalpha: f64 = dmixed
        .as_slice()
        .iter()
        .zip(ln.as_slice().iter().zip(inorm.as_slice()))
        .map(|(d, (l, i))| d * (l - i))
        .sum();
    let mut dln = dmixed.clone();
    dln.as_mut_slice().iter_mut().for_each(|v| *v *= alpha);
    let mut din = dmixed;
    din.as_mut_slice().iter_mut().for_each(|v| *v *= 1.0 - alpha);

    let mut dp = layer_standardize_backward(&ln, &ln_inv, &dln);
    let d_in = instance_standardize_backward(&inorm, &in_inv, &din);
    let d_gen = params.generator.backward(p, &trace, dalpha, &mut grad.generator);
    for ((a, b), c) in dp.as_mut_slice().iter_mut().zip(d_in.as_slice()).zip(d_gen.as_slice()) {
        *a += b + c;
    }
    Ok((grad, dp))
}
