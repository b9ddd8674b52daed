//! Open-set episodes over embedding vectors.
//!
//! A [`FeatureSource`] is a labeled pool of D-dimensional features, either
//! generated from isotropic Gaussian classes or read from a feature file. An
//! [`Episode`] draws `way` known classes (each split into `shot` supports and
//! `query` known queries) and `unknown_classes` disjoint classes that supply
//! the unknown queries.
//!
//! Feature file format: a `dim=<D>` header line, then one row per example of
//! `D` comma-separated reals followed by an integer class label, LF line ends.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{RngState, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub feature: Vector,
    pub class_id: usize,
}

/// A labeled feature table with a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn new(dim: usize, examples: Vec<LabeledExample>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        for (i, ex) in examples.iter().enumerate() {
            if ex.feature.dim() != dim {
                return Err(Error::InvalidArgument(format!(
                    "example {i} has dimension {}, dataset dimension is {dim}",
                    ex.feature.dim()
                )));
            }
        }
        Ok(Dataset { dim, examples })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Distinct class ids in order of first appearance.
    pub fn class_order(&self) -> Vec<usize> {
        let mut seen = HashSet::new();
        let mut order = Vec::new();
        for ex in &self.examples {
            if seen.insert(ex.class_id) {
                order.push(ex.class_id);
            }
        }
        order
    }

    /// Moves the last `holdout` classes (by first appearance) into a second
    /// dataset.
    pub fn split_classes(&self, holdout: usize) -> Result<(Dataset, Dataset)> {
        let order = self.class_order();
        if holdout >= order.len() {
            return Err(Error::InsufficientData(format!(
                "cannot hold out {holdout} of {} classes",
                order.len()
            )));
        }
        let held: Vec<usize> = order[order.len() - holdout..].to_vec();
        let (b, a): (Vec<_>, Vec<_>) = self
            .examples
            .iter()
            .cloned()
            .partition(|ex| held.contains(&ex.class_id));
        Ok((
            Dataset {
                dim: self.dim,
                examples: a,
            },
            Dataset {
                dim: self.dim,
                examples: b,
            },
        ))
    }
}

/// Where a [`FeatureSource`]'s examples came from.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceKind {
    SyntheticGaussian(SyntheticSpec),
    FeatureFile(PathBuf),
    InMemory,
}

/// Parameters of the isotropic Gaussian class generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    /// Class means are uniform in `[-scale, scale]^dim`.
    pub scale: f64,
    /// Within-class standard deviation.
    pub sigma: f64,
    pub per_class: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "synthetic source needs at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.dim == 0 || self.per_class == 0 {
            return Err(Error::invalid("dim and per_class must be positive"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Draws `per_class` examples for each of `classes` Gaussian classes. The
/// class mean is drawn once, uniformly in `[-scale, scale]^dim`.
pub fn generate_synthetic_dataset(rng: &mut RngState, spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut examples = Vec::with_capacity(spec.classes * spec.per_class);
    for class_id in 0..spec.classes {
        let mean: Vec<f64> = (0..spec.dim)
            .map(|_| rng.random_range(-spec.scale..spec.scale))
            .collect();
        for _ in 0..spec.per_class {
            let values = mean
                .iter()
                .map(|&m| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + spec.sigma * z
                })
                .collect();
            examples.push(LabeledExample {
                feature: Vector::new(values)?,
                class_id,
            });
        }
    }
    Dataset::new(spec.dim, examples)
}

/// A read-only labeled feature pool with a per-class index.
#[derive(Debug, Clone)]
pub struct FeatureSource {
    kind: SourceKind,
    dataset: Dataset,
    class_order: Vec<usize>,
    by_class: HashMap<usize, Vec<usize>>,
}

impl FeatureSource {
    pub fn new(kind: SourceKind, dataset: Dataset) -> Self {
        let class_order = dataset.class_order();
        let mut by_class: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, ex) in dataset.examples.iter().enumerate() {
            by_class.entry(ex.class_id).or_default().push(i);
        }
        FeatureSource {
            kind,
            dataset,
            class_order,
            by_class,
        }
    }

    pub fn synthetic(rng: &mut RngState, spec: SyntheticSpec) -> Result<Self> {
        let dataset = generate_synthetic_dataset(rng, &spec)?;
        Ok(FeatureSource::new(SourceKind::SyntheticGaussian(spec), dataset))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let dataset = load_feature_file(path)?;
        Ok(FeatureSource::new(
            SourceKind::FeatureFile(path.to_path_buf()),
            dataset,
        ))
    }

    pub fn in_memory(dataset: Dataset) -> Self {
        FeatureSource::new(SourceKind::InMemory, dataset)
    }

    pub fn kind(&self) -> &SourceKind {
        &self.kind
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn dim(&self) -> usize {
        self.dataset.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_order.len()
    }

    pub fn class_order(&self) -> &[usize] {
        &self.class_order
    }

    fn members(&self, class_id: usize) -> &[usize] {
        self.by_class.get(&class_id).map_or(&[], Vec::as_slice)
    }
}

/// N-way K-shot episode geometry plus the unknown-query configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeShape {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub unknown_classes: usize,
    pub unknown_per_class: usize,
}

impl Default for EpisodeShape {
    fn default() -> Self {
        EpisodeShape {
            way: 5,
            shot: 1,
            query: 15,
            unknown_classes: 5,
            unknown_per_class: 15,
        }
    }
}

impl EpisodeShape {
    pub fn validate(&self) -> Result<()> {
        if self.way == 0 {
            return Err(Error::invalid("way must be at least 1"));
        }
        if self.shot == 0 {
            return Err(Error::invalid("shot must be at least 1"));
        }
        if self.unknown_classes > 0 && self.unknown_per_class == 0 {
            return Err(Error::invalid(
                "unknown_per_class must be positive when unknown classes are requested",
            ));
        }
        Ok(())
    }

    /// Same shape without unknown queries, as used for training episodes.
    pub fn closed_set(self) -> Self {
        EpisodeShape {
            unknown_classes: 0,
            unknown_per_class: 0,
            ..self
        }
    }
}

/// One open-set task. Known classes are relabeled `0..way` in draw order and
/// unknown classes `way..way + unknown_classes`; the source ids are kept in
/// `known_class_ids` / `unknown_class_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub supports: Vec<LabeledExample>,
    pub known_queries: Vec<LabeledExample>,
    pub unknown_queries: Vec<LabeledExample>,
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub known_class_ids: Vec<usize>,
    pub unknown_class_ids: Vec<usize>,
    /// Unknown queries were drawn from a different source than the knowns.
    pub cross_domain: bool,
}

impl Episode {
    pub fn dim(&self) -> usize {
        self.supports[0].feature.dim()
    }

    /// Checks every structural invariant of an episode.
    pub fn validate(&self) -> Result<()> {
        if self.way == 0 || self.shot == 0 {
            return Err(Error::invalid("episode needs way >= 1 and shot >= 1"));
        }
        let mut support_counts = vec![0usize; self.way];
        let mut query_counts = vec![0usize; self.way];
        for ex in &self.supports {
            *support_counts
                .get_mut(ex.class_id)
                .ok_or_else(|| Error::invalid("support label outside 0..way"))? += 1;
        }
        for ex in &self.known_queries {
            *query_counts
                .get_mut(ex.class_id)
                .ok_or_else(|| Error::invalid("known query label outside 0..way"))? += 1;
        }
        if support_counts.iter().any(|&c| c != self.shot) {
            return Err(Error::InvalidArgument(format!(
                "support counts {support_counts:?}, expected {} per class",
                self.shot
            )));
        }
        if query_counts.iter().any(|&c| c != self.queries_per_class) {
            return Err(Error::InvalidArgument(format!(
                "known query counts {query_counts:?}, expected {} per class",
                self.queries_per_class
            )));
        }
        if self.unknown_queries.iter().any(|ex| ex.class_id < self.way) {
            return Err(Error::invalid("unknown query labelled with a known class"));
        }
        // Source ids from two different domains may coincide numerically.
        if !self.cross_domain
            && self
                .unknown_class_ids
                .iter()
                .any(|u| self.known_class_ids.contains(u))
        {
            return Err(Error::invalid("known and unknown class sets intersect"));
        }
        let dim = self.dim();
        let all = self
            .supports
            .iter()
            .chain(&self.known_queries)
            .chain(&self.unknown_queries);
        for ex in all {
            if ex.feature.dim() != dim {
                return Err(Error::dim("episode feature", dim, ex.feature.dim()));
            }
        }
        Ok(())
    }
}

/// Draws an episode from one source; known and unknown classes are disjoint.
pub fn sample_episode(rng: &mut RngState, source: &FeatureSource, shape: &EpisodeShape) -> Result<Episode> {
    shape.validate()?;
    let needed = shape.way + shape.unknown_classes;
    if source.class_count() < needed {
        return Err(Error::InsufficientData(format!(
            "episode needs {} known + {} unknown = {needed} classes, source has {}",
            shape.way,
            shape.unknown_classes,
            source.class_count()
        )));
    }
    let picks = index::sample(rng, source.class_count(), needed).into_vec();
    let classes: Vec<usize> = picks.iter().map(|&i| source.class_order[i]).collect();
    let (known, unknown) = classes.split_at(shape.way);
    draw_episode(rng, source, known, source, unknown, shape)
}

/// Cross-domain variant: supports and known queries come from `known_source`,
/// unknown queries from `unknown_source`.
pub fn sample_cross_domain_episode(
    rng: &mut RngState,
    known_source: &FeatureSource,
    unknown_source: &FeatureSource,
    shape: &EpisodeShape,
) -> Result<Episode> {
    shape.validate()?;
    if known_source.dim() != unknown_source.dim() {
        return Err(Error::dim(
            "cross-domain sources",
            known_source.dim(),
            unknown_source.dim(),
        ));
    }
    if known_source.class_count() < shape.way {
        return Err(Error::InsufficientData(format!(
            "episode needs {} known classes, known source has {}",
            shape.way,
            known_source.class_count()
        )));
    }
    if unknown_source.class_count() < shape.unknown_classes {
        return Err(Error::InsufficientData(format!(
            "episode needs {} unknown classes, unknown source has {}",
            shape.unknown_classes,
            unknown_source.class_count()
        )));
    }
    let known: Vec<usize> = index::sample(rng, known_source.class_count(), shape.way)
        .into_iter()
        .map(|i| known_source.class_order[i])
        .collect();
    let unknown: Vec<usize> = index::sample(rng, unknown_source.class_count(), shape.unknown_classes)
        .into_iter()
        .map(|i| unknown_source.class_order[i])
        .collect();
    draw_episode(rng, known_source, &known, unknown_source, &unknown, shape)
}

fn draw_episode(
    rng: &mut RngState,
    known_source: &FeatureSource,
    known: &[usize],
    unknown_source: &FeatureSource,
    unknown: &[usize],
    shape: &EpisodeShape,
) -> Result<Episode> {
    let per_known = shape.shot + shape.query;
    for &c in known {
        let have = known_source.members(c).len();
        if have < per_known {
            return Err(Error::InsufficientData(format!(
                "known class {c} has {have} examples, episode needs {} shot + {} query = {per_known}",
                shape.shot, shape.query
            )));
        }
    }
    for &c in unknown {
        let have = unknown_source.members(c).len();
        if have < shape.unknown_per_class {
            return Err(Error::InsufficientData(format!(
                "unknown class {c} has {have} examples, episode needs {}",
                shape.unknown_per_class
            )));
        }
    }

    let mut supports = Vec::with_capacity(shape.way * shape.shot);
    let mut known_queries = Vec::with_capacity(shape.way * shape.query);
    for (label, &c) in known.iter().enumerate() {
        let pool = known_source.members(c);
        let chosen = index::sample(rng, pool.len(), per_known).into_vec();
        for (j, &k) in chosen.iter().enumerate() {
            let ex = LabeledExample {
                feature: known_source.dataset.examples[pool[k]].feature.clone(),
                class_id: label,
            };
            if j < shape.shot {
                supports.push(ex);
            } else {
                known_queries.push(ex);
            }
        }
    }

    let mut unknown_queries = Vec::with_capacity(shape.unknown_classes * shape.unknown_per_class);
    for (j, &c) in unknown.iter().enumerate() {
        let pool = unknown_source.members(c);
        for k in index::sample(rng, pool.len(), shape.unknown_per_class) {
            unknown_queries.push(LabeledExample {
                feature: unknown_source.dataset.examples[pool[k]].feature.clone(),
                class_id: shape.way + j,
            });
        }
    }

    Ok(Episode {
        supports,
        known_queries,
        unknown_queries,
        way: shape.way,
        shot: shape.shot,
        queries_per_class: shape.query,
        known_class_ids: known.to_vec(),
        unknown_class_ids: unknown.to_vec(),
        cross_domain: !std::ptr::eq(known_source, unknown_source),
    })
}

/// Parses feature-file text. `origin` labels error messages.
pub fn parse_feature_text(text: &str, origin: &str) -> Result<Dataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut lines = text.split('\n').enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing `dim=<D>` header".into()))?;
    let dim: usize = header
        .trim_end_matches('\r')
        .strip_prefix("dim=")
        .and_then(|d| d.trim().parse().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| parse_err(1, format!("expected header `dim=<D>`, found {header:?}")))?;

    let mut examples = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(parse_err(
                line_no,
                format!(
                    "expected {dim} values and a label ({} fields), found {} fields",
                    dim + 1,
                    fields.len()
                ),
            ));
        }
        let mut values = Vec::with_capacity(dim);
        for (j, f) in fields[..dim].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(line_no, format!("field {} is not a number: {f:?}", j + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(line_no, format!("field {} is not finite", j + 1)));
            }
            values.push(v);
        }
        let label = fields[dim];
        let class_id: usize = label.parse().map_err(|_| {
            parse_err(
                line_no,
                format!("label is not a non-negative integer: {label:?}"),
            )
        })?;
        examples.push(LabeledExample {
            feature: Vector::new(values)?,
            class_id,
        });
    }
    Dataset::new(dim, examples)
}

pub fn load_feature_file(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_feature_text(&text, &path.display().to_string())
}

/// Canonical text form: shortest round-trip decimal for every value.
pub fn render_feature_file(dataset: &Dataset) -> String {
    let mut out = format!("dim={}\n", dataset.dim);
    for ex in &dataset.examples {
        for v in ex.feature.iter() {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{}", ex.class_id);
    }
    out
}

pub fn write_feature_file(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    fs::write(path, render_feature_file(dataset))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn source(classes: usize, per_class: usize, dim: usize, seed: u64) -> FeatureSource {
        let spec = SyntheticSpec {
            classes,
            dim,
            scale: 2.0,
            sigma: 0.5,
            per_class,
        };
        FeatureSource::synthetic(&mut RngState::new(seed), spec).unwrap()
    }

    #[test]
    fn degenerate_sigma_collapses_to_mean() {
        let spec = SyntheticSpec {
            classes: 3,
            dim: 4,
            scale: 1.0,
            sigma: 1e-12,
            per_class: 5,
        };
        let ds = generate_synthetic_dataset(&mut RngState::new(2), &spec).unwrap();
        for c in 0..3 {
            let rows: Vec<_> = ds.examples().iter().filter(|e| e.class_id == c).collect();
            for r in &rows {
                for d in 0..4 {
                    assert!((r.feature[d] - rows[0].feature[d]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn class_sample_means_concentrate() {
        // Law-of-large-numbers oracle: the sample mean of 100 draws sits within
        // 4σ/√100 of the class mean for the vast majority of coordinates. The
        // class mean is recovered from a second, σ→0 draw with the same seed.
        let sigma = 1.0;
        let spec = SyntheticSpec {
            classes: 10,
            dim: 16,
            scale: 5.0,
            sigma,
            per_class: 100,
        };
        let ds = generate_synthetic_dataset(&mut RngState::new(9), &spec).unwrap();
        let mut rng = RngState::new(9);
        let mut hits = 0;
        let mut total = 0;
        for c in 0..10 {
            // Replay the generator's draw order to read back μ_c.
            let mean: Vec<f64> = (0..16).map(|_| rng.random_range(-5.0..5.0)).collect();
            for _ in 0..100 * 16 {
                let _: f64 = rng.sample(StandardNormal);
            }
            let rows: Vec<_> = ds.examples().iter().filter(|e| e.class_id == c).collect();
            for d in 0..16 {
                let m: f64 = rows.iter().map(|r| r.feature[d]).sum::<f64>() / rows.len() as f64;
                total += 1;
                if (m - mean[d]).abs() <= 4.0 * sigma / 10.0 {
                    hits += 1;
                }
            }
        }
        assert!(hits as f64 >= 0.95 * total as f64, "{hits}/{total}");
    }

    #[test]
    fn synthetic_is_deterministic_and_validated() {
        let a = source(4, 3, 5, 7);
        let b = source(4, 3, 5, 7);
        assert_eq!(a.dataset(), b.dataset());
        let bad = SyntheticSpec {
            classes: 1,
            dim: 2,
            scale: 1.0,
            sigma: 1.0,
            per_class: 2,
        };
        assert!(generate_synthetic_dataset(&mut RngState::new(0), &bad).is_err());
    }

    #[test]
    fn default_sized_episode() {
        let src = source(20, 30, 8, 1);
        let shape = EpisodeShape {
            way: 5,
            shot: 1,
            query: 15,
            unknown_classes: 5,
            unknown_per_class: 15,
        };
        let ep = sample_episode(&mut RngState::new(3), &src, &shape).unwrap();
        assert_eq!(ep.supports.len(), 5);
        assert_eq!(ep.known_queries.len(), 75);
        assert_eq!(ep.unknown_queries.len(), 75);
        ep.validate().unwrap();
    }

    #[test]
    fn minimal_episode() {
        let src = source(2, 2, 3, 1);
        let shape = EpisodeShape {
            way: 1,
            shot: 1,
            query: 1,
            unknown_classes: 1,
            unknown_per_class: 1,
        };
        let ep = sample_episode(&mut RngState::new(0), &src, &shape).unwrap();
        assert_eq!(
            (ep.supports.len(), ep.known_queries.len(), ep.unknown_queries.len()),
            (1, 1, 1)
        );
        ep.validate().unwrap();
    }

    #[test]
    fn known_and_unknown_disjoint_over_many_trials() {
        let src = source(12, 6, 2, 4);
        let shape = EpisodeShape {
            way: 5,
            shot: 2,
            query: 3,
            unknown_classes: 5,
            unknown_per_class: 4,
        };
        for t in 0..1000 {
            let ep = sample_episode(&mut RngState::derived(1, "trial", t), &src, &shape).unwrap();
            for u in &ep.unknown_class_ids {
                assert!(!ep.known_class_ids.contains(u));
            }
        }
    }

    #[test]
    fn insufficient_data_reports_counts() {
        let src = source(3, 4, 2, 4);
        let shape = EpisodeShape {
            way: 2,
            shot: 1,
            query: 1,
            unknown_classes: 2,
            unknown_per_class: 1,
        };
        let err = sample_episode(&mut RngState::new(0), &src, &shape).unwrap_err();
        assert!(err.to_string().contains("source has 3"), "{err}");
        let shape = EpisodeShape {
            way: 2,
            shot: 3,
            query: 2,
            unknown_classes: 1,
            unknown_per_class: 1,
        };
        let err = sample_episode(&mut RngState::new(0), &src, &shape).unwrap_err();
        assert!(err.to_string().contains("has 4 examples"), "{err}");
    }

    #[test]
    fn feature_file_examples() {
        let ds = parse_feature_text("dim=2\n1.0,2.0,0\n3.0,4.0,1\n", "t").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.examples()[0].class_id, 0);
        assert_eq!(ds.examples()[1].class_id, 1);
        assert_eq!(ds.examples()[1].feature.as_slice(), &[3.0, 4.0]);

        let empty = parse_feature_text("dim=3\n", "t").unwrap();
        assert!(empty.is_empty());

        let err = parse_feature_text("dim=2\n1.0,2.0,0\n3.0,1\n", "f.csv").unwrap_err();
        assert!(err.to_string().starts_with("f.csv:3:"), "{err}");
        let err = parse_feature_text("dim=1\nabc,0\n", "f.csv").unwrap_err();
        assert!(err.to_string().contains("f.csv:2"), "{err}");
        let err = parse_feature_text("dim=1\n1.0,-1\n", "f.csv").unwrap_err();
        assert!(err.to_string().contains("label"), "{err}");
        assert!(parse_feature_text("1.0,2.0\n", "f.csv").is_err());
    }

    #[test]
    fn split_classes_holds_out_tail() {
        let src = source(5, 2, 2, 0);
        let (a, b) = src.dataset().split_classes(2).unwrap();
        assert_eq!(a.class_order(), vec![0, 1, 2]);
        assert_eq!(b.class_order(), vec![3, 4]);
        assert!(src.dataset().split_classes(5).is_err());
    }

    #[test]
    fn cross_domain_rejects_dim_mismatch() {
        let a = source(5, 3, 4, 0);
        let b = source(5, 3, 3, 0);
        let shape = EpisodeShape {
            way: 2,
            shot: 1,
            query: 1,
            unknown_classes: 2,
            unknown_per_class: 1,
        };
        assert!(sample_cross_domain_episode(&mut RngState::new(0), &a, &b, &shape).is_err());
        let c = source(5, 3, 4, 1);
        let ep = sample_cross_domain_episode(&mut RngState::new(0), &a, &c, &shape).unwrap();
        ep.validate().unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn sampled_episodes_are_well_formed(
            seed in any::<u64>(),
            way in 1usize..5,
            shot in 1usize..4,
            query in 0usize..4,
            unknown_classes in 0usize..4,
            unknown_per_class in 1usize..4,
        ) {
            let src = source(9, 8, 3, seed);
            let shape = EpisodeShape { way, shot, query, unknown_classes, unknown_per_class };
            let ep = sample_episode(&mut RngState::new(seed), &src, &shape).unwrap();
            ep.validate().unwrap();
            prop_assert_eq!(ep.supports.len(), way * shot);
            prop_assert_eq!(ep.unknown_queries.len(), unknown_classes * unknown_per_class);
        }

        #[test]
        fn sampling_is_exchangeable_in_class_ids(seed in any::<u64>(), rot in 1usize..9) {
            let src = source(9, 6, 3, seed);
            let relabel = |c: usize| (c + rot) % 9 + 100;
            let permuted = Dataset::new(3, src.dataset().examples().iter().map(|e| LabeledExample {
                feature: e.feature.clone(),
                class_id: relabel(e.class_id),
            }).collect()).unwrap();
            let psrc = FeatureSource::in_memory(permuted);
            let shape = EpisodeShape { way: 3, shot: 2, query: 2, unknown_classes: 2, unknown_per_class: 2 };
            let a = sample_episode(&mut RngState::new(seed), &src, &shape).unwrap();
            let b = sample_episode(&mut RngState::new(seed), &psrc, &shape).unwrap();
            let mapped: Vec<usize> = a.known_class_ids.iter().map(|&c| relabel(c)).collect();
            prop_assert_eq!(mapped, b.known_class_ids.clone());
            prop_assert_eq!(a.supports, b.supports);
            prop_assert_eq!(a.known_queries, b.known_queries);
            prop_assert_eq!(a.unknown_queries, b.unknown_queries);
        }

        #[test]
        fn canonical_files_round_trip(seed in any::<u64>()) {
            let src = source(3, 2, 4, seed);
            let text = render_feature_file(src.dataset());
            let back = parse_feature_text(&text, "mem").unwrap();
            prop_assert_eq!(&back, src.dataset());
            prop_assert_eq!(render_feature_file(&back), text);
        }
    }
}
