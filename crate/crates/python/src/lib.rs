//! Python bindings: `import fsosr`.
//!
//! Matrices cross the boundary as lists of rows (nested sequences of floats,
//! so numpy arrays work too); labels are non-negative integers.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fsosr_core::checkpoint::Checkpoint;
use fsosr_core::classifier::{EncoderSpec, PrototypeSet, DEFAULT_TEMPERATURE};
use fsosr_core::detector::{self, DetectorKind};
use fsosr_core::episodes::{generate_synthetic_dataset, Dataset, EpisodeShape, FeatureSource, LabeledExample, SyntheticSpec};
use fsosr_core::evaluation::{self, EvalConfig, EvalSources};
use fsosr_core::numerics::{Matrix, RngState, Vector};
use fsosr_core::training::{self, LossConfig, TrainConfig};
use fsosr_core::transforms::{HeadKind, TransformContext, TransformHead};
use fsosr_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<Matrix, Error> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("expected at least one row".into()));
    }
    Matrix::from_rows(rows)
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

fn to_dataset(features: &[Vec<f64>], labels: &[usize]) -> Result<Dataset, Error> {
    if features.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = features.first().map_or(0, Vec::len);
    let examples = features
        .iter()
        .zip(labels)
        .map(|(f, &class_id)| {
            Ok(LabeledExample {
                feature: Vector::new(f.clone())?,
                class_id,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Dataset::new(dim, examples)
}

/// A set-transformation head together with the encoder it was trained with.
#[pyclass(module = "fsosr", frozen)]
struct Head {
    head: TransformHead,
    encoder: EncoderSpec,
}

impl Head {
    fn context<'a>(&self, supports: Option<&'a Matrix>) -> TransformContext<'a> {
        match supports {
            Some(s) => TransformContext::with_supports(s),
            None => TransformContext::none(),
        }
    }
}

#[pymethods]
impl Head {
    /// A freshly initialized head: identity, deepsets, attention, ln, in, tasknorm or ltn.
    #[new]
    #[pyo3(signature = (kind, dim, seed = 0))]
    fn new(kind: &str, dim: usize, seed: u64) -> PyResult<Self> {
        let kind: HeadKind = kind.parse().map_err(py_err)?;
        let head = TransformHead::init(kind, dim, &mut RngState::derived(seed, "head-init", 0)).map_err(py_err)?;
        Ok(Head {
            head,
            encoder: EncoderSpec::Identity,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(py_err)?;
        Ok(Head {
            head: ck.head,
            encoder: ck.encoder,
        })
    }

    #[pyo3(signature = (path, step = 0, seed = 0))]
    fn save(&self, path: &str, step: u64, seed: u64) -> PyResult<()> {
        Checkpoint {
            head: self.head.clone(),
            encoder: self.encoder.clone(),
            step,
            seed,
        }
        .save(path)
        .map_err(py_err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.head.kind().name()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.head.dim()
    }

    #[getter]
    fn param_count(&self) -> usize {
        fsosr_core::params::Params::param_count(&self.head)
    }

    /// Transforms a prototype set. `supports` is required by tasknorm.
    #[pyo3(signature = (prototypes, supports = None))]
    fn forward(&self, prototypes: Vec<Vec<f64>>, supports: Option<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let protos = PrototypeSet::new(to_matrix(&prototypes).map_err(py_err)?).map_err(py_err)?;
        let supports = supports.map(|s| to_matrix(&s)).transpose().map_err(py_err)?;
        let out = self.head.forward(&protos, &self.context(supports.as_ref())).map_err(py_err)?;
        Ok(to_rows(out.matrix()))
    }

    /// `(predicted_class, score)`; larger scores mean more likely unknown.
    #[pyo3(signature = (query, prototypes, supports = None))]
    fn snatcher_score(
        &self,
        query: Vec<f64>,
        prototypes: Vec<Vec<f64>>,
        supports: Option<Vec<Vec<f64>>>,
    ) -> PyResult<(usize, f64)> {
        let protos = PrototypeSet::new(to_matrix(&prototypes).map_err(py_err)?).map_err(py_err)?;
        let supports = supports.map(|s| to_matrix(&s)).transpose().map_err(py_err)?;
        let d = detector::snatcher_score(&query, &protos, &self.head, &self.context(supports.as_ref()))
            .map_err(py_err)?;
        Ok((d.predicted_class, d.score))
    }

    fn __repr__(&self) -> String {
        format!("Head(kind={:?}, dim={}, encoder={:?})", self.head.kind().name(), self.head.dim(), self.encoder.name())
    }
}

/// `(features, labels)` drawn from isotropic Gaussian classes.
#[pyfunction]
#[pyo3(signature = (classes, dim, per_class, scale = 3.0, sigma = 1.0, seed = 0))]
fn generate_synthetic(
    classes: usize,
    dim: usize,
    per_class: usize,
    scale: f64,
    sigma: f64,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let spec = SyntheticSpec {
        classes,
        dim,
        scale,
        sigma,
        per_class,
    };
    let data = generate_synthetic_dataset(&mut RngState::new(seed), &spec).map_err(py_err)?;
    Ok(data
        .examples()
        .iter()
        .map(|ex| (ex.feature.as_slice().to_vec(), ex.class_id))
        .unzip())
}

/// `(predicted_class, min squared distance)` against the given prototypes.
#[pyfunction]
fn distance_score(query: Vec<f64>, prototypes: Vec<Vec<f64>>) -> PyResult<(usize, f64)> {
    let protos = PrototypeSet::new(to_matrix(&prototypes).map_err(py_err)?).map_err(py_err)?;
    let d = detector::distance_score(&query, &protos).map_err(py_err)?;
    Ok((d.predicted_class, d.score))
}

/// Probability that an unknown outscores a known, ties counting half.
#[pyfunction]
fn auroc(known: Vec<f64>, unknown: Vec<f64>) -> PyResult<f64> {
    evaluation::auroc(&known, &unknown).map_err(py_err)
}

/// Mean accuracy and per-detector AUROC with 95% intervals over seeded episodes.
#[pyfunction]
#[pyo3(signature = (
    head, features, labels, episodes = 100, way = 5, shot = 1, query = 15,
    unknown_classes = 5, unknown_per_class = 15, seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    head: &Head,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    episodes: usize,
    way: usize,
    shot: usize,
    query: usize,
    unknown_classes: usize,
    unknown_per_class: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let source = FeatureSource::in_memory(to_dataset(&features, &labels).map_err(py_err)?);
    let cfg = EvalConfig {
        episodes,
        shape: EpisodeShape {
            way,
            shot,
            query,
            unknown_classes,
            unknown_per_class,
        },
        temperature: DEFAULT_TEMPERATURE,
        seed,
        detectors: DetectorKind::ALL.to_vec(),
        keep_scores: false,
    };
    let summary = py
        .detach(|| evaluation::evaluate(EvalSources::Single(&source), &head.encoder, &head.head, &cfg))
        .map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("episodes", summary.episodes)?;
    out.set_item("accuracy", (summary.accuracy.mean, summary.accuracy.ci))?;
    let aurocs = PyDict::new(py);
    for (det, stat) in &summary.auroc {
        aurocs.set_item(det.name(), (stat.mean, stat.ci))?;
    }
    out.set_item("auroc", aurocs)?;
    Ok(out)
}

/// Trains a fresh head on closed-set episodes and returns the final parameters.
#[pyfunction]
#[pyo3(signature = (kind, features, labels, episodes = 200, way = 5, shot = 1, query = 15, lam = 0.1, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    kind: &str,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    episodes: usize,
    way: usize,
    shot: usize,
    query: usize,
    lam: f64,
    seed: u64,
) -> PyResult<Head> {
    let mut head = Head::new(kind, features.first().map_or(0, Vec::len), seed)?;
    let source = FeatureSource::in_memory(to_dataset(&features, &labels).map_err(py_err)?);
    let cfg = TrainConfig {
        episodes,
        shape: EpisodeShape {
            way,
            shot,
            query,
            unknown_classes: 0,
            unknown_per_class: 0,
        },
        loss: LossConfig {
            temperature: DEFAULT_TEMPERATURE,
            lambda: lam,
        },
        seed,
        ..TrainConfig::default()
    };
    let out = py
        .detach(|| training::train(&source, None, head.head.clone(), EncoderSpec::Identity, &cfg))
        .map_err(py_err)?;
    head.head = out.head;
    head.encoder = out.encoder;
    Ok(head)
}

#[pymodule]
pub fn fsosr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Head>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(distance_score, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("HEADS", HeadKind::ALL.iter().map(|k| k.name()).collect::<Vec<_>>())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.5]];
        assert_eq!(to_rows(&to_matrix(&rows).unwrap()), rows);
        assert!(to_matrix(&[]).is_err());
        assert!(to_matrix(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn dataset_conversion_checks_lengths() {
        let f = vec![vec![0.0, 1.0], vec![2.0, 3.0]];
        let d = to_dataset(&f, &[4, 7]).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.dim(), 2);
        assert!(to_dataset(&f, &[1]).is_err());
        assert!(to_dataset(&[vec![f64::NAN]], &[0]).is_err());
    }
}
