//! Unknown-query scoring. Every detector reports a score where higher means
//! more likely unknown.
//!
//! The transformation-consistency score replaces the predicted class's raw
//! prototype with the raw query, transforms the modified set, and sums the
//! squared distances between matching members of the two transformed sets. A
//! query that looks like a member of its predicted class barely moves the
//! transformed set.

use std::fmt;
use std::str::FromStr;

use crate::classifier::{classify, nearest_prototype, PrototypeSet};
use crate::error::{Error, Result};
use crate::numerics::{sq_dist, Matrix};
use crate::transforms::{TransformContext, TransformHead};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DetectorKind {
    Probability,
    Distance,
    Snatcher,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 3] = [DetectorKind::Probability, DetectorKind::Distance, DetectorKind::Snatcher];

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Probability => "probability",
            DetectorKind::Distance => "distance",
            DetectorKind::Snatcher => "snatcher",
        }
    }

    /// Parses a comma-separated list such as `distance,snatcher`.
    pub fn parse_list(s: &str) -> Result<Vec<DetectorKind>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let kind: DetectorKind = part.parse()?;
            if !out.contains(&kind) {
                out.push(kind);
            }
        }
        if out.is_empty() {
            return Err(Error::invalid("detector list is empty"));
        }
        Ok(out)
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DetectorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown detector '{s}', expected one of probability|distance|snatcher"
                ))
            })
    }
}

/// Predicted episode class and unknown-ness score for one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub predicted_class: usize,
    pub score: f64,
}

/// A scored query as written to score dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionScore {
    pub query_index: usize,
    pub predicted_class: usize,
    pub score: f64,
    pub detector: DetectorKind,
}

/// Negated maximum class probability against the transformed prototypes.
pub fn probability_score(query: &[f64], transformed: &PrototypeSet, temperature: f64) -> Result<Detection> {
    let probs = classify(query, transformed, temperature)?;
    Ok(Detection {
        predicted_class: probs.predicted(),
        score: -probs.max(),
    })
}

/// Squared distance to the nearest transformed prototype.
pub fn distance_score(query: &[f64], transformed: &PrototypeSet) -> Result<Detection> {
    let (predicted_class, score) = nearest_prototype(query, transformed)?;
    Ok(Detection { predicted_class, score })
}

/// Per-episode scorer caching `T(P)`.
#[derive(Debug, Clone)]
pub struct SnatcherScorer<'h> {
    head: &'h TransformHead,
    protos: PrototypeSet,
    transformed: PrototypeSet,
    supports: Option<Matrix>,
}

impl<'h> SnatcherScorer<'h> {
    pub fn new(head: &'h TransformHead, protos: &PrototypeSet, ctx: &TransformContext<'_>) -> Result<Self> {
        let transformed = head.forward(protos, ctx)?;
        Ok(SnatcherScorer {
            head,
            protos: protos.clone(),
            transformed,
            supports: ctx.support_features.cloned(),
        })
    }

    pub fn prototypes(&self) -> &PrototypeSet {
        &self.protos
    }

    pub fn transformed(&self) -> &PrototypeSet {
        &self.transformed
    }

    pub fn head(&self) -> &TransformHead {
        self.head
    }

    fn ctx(&self) -> TransformContext<'_> {
        TransformContext {
            support_features: self.supports.as_ref(),
        }
    }

    pub fn score(&self, query: &[f64]) -> Result<Detection> {
        let (predicted_class, _) = nearest_prototype(query, &self.transformed)?;
        if !query.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("query feature".into()));
        }
        let swapped = self.protos.replaced(predicted_class, query);
        let moved = self.head.forward(&swapped, &self.ctx())?;
        let score = moved
            .matrix()
            .iter_rows()
            .zip(self.transformed.matrix().iter_rows())
            .map(|(a, b)| sq_dist(a, b))
            .sum();
        Ok(Detection { predicted_class, score })
    }

    /// Scores of each row of `features` taken as a query.
    pub fn score_rows(&self, features: &Matrix) -> Result<Vec<Detection>> {
        features.iter_rows().map(|row| self.score(row)).collect()
    }
}

/// One-shot transformation-consistency score. Prefer [`SnatcherScorer`] when
/// scoring many queries of the same episode.
pub fn snatcher_score(
    query: &[f64],
    protos: &PrototypeSet,
    head: &TransformHead,
    ctx: &TransformContext<'_>,
) -> Result<Detection> {
    SnatcherScorer::new(head, protos, ctx)?.score(query)
}

pub const DEFAULT_QUANTILE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Calibration {
    Fixed,
    Quantile { q: f64, samples: usize },
}

/// Rejection threshold `η`; a query is unknown iff its score exceeds `η`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub eta: f64,
    pub calibration: Calibration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Known,
    Unknown,
}

impl Threshold {
    pub fn fixed(eta: f64) -> Result<Self> {
        if !eta.is_finite() {
            return Err(Error::NonFinite("threshold".into()));
        }
        Ok(Threshold {
            eta,
            calibration: Calibration::Fixed,
        })
    }

    /// `η` at quantile `q` of `scores`.
    pub fn from_quantile(scores: &[f64], q: f64) -> Result<Self> {
        if scores.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "quantile calibration needs at least 2 scores, got {}",
                scores.len()
            )));
        }
        Ok(Threshold {
            eta: quantile(scores, q)?,
            calibration: Calibration::Quantile {
                q,
                samples: scores.len(),
            },
        })
    }

    /// Calibrates on the episode's own supports, each scored as if it were a
    /// query.
    pub fn from_supports(scorer: &SnatcherScorer<'_>, supports: &Matrix, q: f64) -> Result<Self> {
        let scores: Vec<f64> = scorer.score_rows(supports)?.iter().map(|d| d.score).collect();
        Threshold::from_quantile(&scores, q)
    }
}

pub fn reject(score: f64, threshold: &Threshold) -> Verdict {
    if score > threshold.eta {
        Verdict::Unknown
    } else {
        Verdict::Known
    }
}

/// Quantile with linear interpolation between order statistics at position
/// `q · (n − 1)`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientData("quantile of an empty list".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("quantile must lie in [0, 1], got {q}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantile input".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;
    use crate::params::Params;
    use crate::transforms::HeadKind;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn probability_examples() {
        let p = PrototypeSet::from_rows(&[[0.0], [1e4], [-1e4]]).unwrap();
        let d = probability_score(&[0.0], &p, 64.0).unwrap();
        assert_eq!(d.predicted_class, 0);
        assert!((d.score + 1.0).abs() < 1e-12);

        let rows: Vec<Vec<f64>> = (0..5).map(|c| (0..5).map(|j| if j == c { 3.0 } else { 0.0 }).collect()).collect();
        let q = PrototypeSet::from_rows(&rows).unwrap();
        let d = probability_score(&[0.0; 5], &q, 64.0).unwrap();
        assert!((d.score + 0.2).abs() < 1e-12);
    }

    #[test]
    fn probability_matches_classifier() {
        let mut rng = RngState::new(4);
        let p = PrototypeSet::new(random_matrix(&mut rng, 5, 7)).unwrap();
        let q = random_matrix(&mut rng, 1, 7);
        let d = probability_score(q.row(0), &p, 3.0).unwrap();
        let probs = classify(q.row(0), &p, 3.0).unwrap();
        let max = probs.as_slice().iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(d.score, -max);
    }

    #[test]
    fn distance_examples() {
        let p = PrototypeSet::from_rows(&[[0.0], [10.0]]).unwrap();
        assert_eq!(distance_score(&[4.0], &p).unwrap(), Detection { predicted_class: 0, score: 16.0 });
        assert_eq!(distance_score(&[10.0], &p).unwrap().score, 0.0);

        let mut rng = RngState::new(6);
        let p = PrototypeSet::new(random_matrix(&mut rng, 5, 4)).unwrap();
        let q = [0.1, 0.4, -0.3, 1.0];
        let brute = (0..5)
            .map(|c| p.prototype(c).iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(distance_score(&q, &p).unwrap().score, brute);
    }

    #[test]
    fn identity_head_equals_distance() {
        let mut rng = RngState::new(9);
        let head = TransformHead::init(HeadKind::Identity, 6, &mut rng).unwrap();
        let p = PrototypeSet::new(random_matrix(&mut rng, 5, 6)).unwrap();
        let scorer = SnatcherScorer::new(&head, &p, &TransformContext::none()).unwrap();
        for row in random_matrix(&mut rng, 50, 6).iter_rows() {
            assert_eq!(scorer.score(row).unwrap(), distance_score(row, &p).unwrap());
        }
    }

    /// Replace-and-transform computed step by step.
    fn oracle(query: &[f64], p: &PrototypeSet, head: &TransformHead, supports: &Matrix) -> (usize, f64) {
        let ctx = TransformContext::with_supports(supports);
        let tp = head.forward(p, &ctx).unwrap();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..tp.way() {
            let mut d = 0.0;
            for j in 0..tp.dim() {
                d += (query[j] - tp.prototype(c)[j]).powi(2);
            }
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        let mut rows: Vec<Vec<f64>> = (0..p.way()).map(|c| p.prototype(c).to_vec()).collect();
        rows[best] = query.to_vec();
        let tq = head.forward(&PrototypeSet::from_rows(&rows).unwrap(), &ctx).unwrap();
        let mut total = 0.0;
        for c in 0..p.way() {
            for j in 0..p.dim() {
                total += (tq.prototype(c)[j] - tp.prototype(c)[j]).powi(2);
            }
        }
        (best, total)
    }

    #[test]
    fn every_head_matches_stepwise_oracle() {
        let mut rng = RngState::new(21);
        let p = PrototypeSet::new(random_matrix(&mut rng, 5, 6)).unwrap();
        let supports = random_matrix(&mut rng, 10, 6);
        for kind in HeadKind::ALL {
            let mut head = TransformHead::init(kind, 6, &mut rng).unwrap();
            head.jitter(&mut rng, 0.2);
            let ctx = TransformContext::with_supports(&supports);
            let scorer = SnatcherScorer::new(&head, &p, &ctx).unwrap();
            for row in random_matrix(&mut rng, 10, 6).iter_rows() {
                let got = scorer.score(row).unwrap();
                let (c, s) = oracle(row, &p, &head, &supports);
                assert_eq!(got.predicted_class, c, "{kind}");
                assert!((got.score - s).abs() <= 1e-12 * s.max(1.0), "{kind}");
            }
        }
    }

    #[test]
    fn query_on_its_predicted_prototype_scores_zero() {
        let mut rng = RngState::new(2);
        let p = PrototypeSet::new(random_matrix(&mut rng, 4, 5)).unwrap();
        let supports = random_matrix(&mut rng, 4, 5);
        let ctx = TransformContext::with_supports(&supports);
        for kind in HeadKind::ALL {
            let head = TransformHead::init(kind, 5, &mut rng).unwrap();
            let scorer = SnatcherScorer::new(&head, &p, &ctx).unwrap();
            for c in 0..4 {
                let d = scorer.score(p.prototype(c)).unwrap();
                if d.predicted_class == c {
                    assert_eq!(d.score, 0.0, "{kind}");
                }
            }
        }
        let head = TransformHead::init(HeadKind::Identity, 5, &mut rng).unwrap();
        let d = snatcher_score(p.prototype(2), &p, &head, &TransformContext::none()).unwrap();
        assert_eq!(d, Detection { predicted_class: 2, score: 0.0 });
    }

    #[test]
    fn threshold_examples() {
        let t = Threshold::fixed(3.0).unwrap();
        assert_eq!(reject(5.0, &t), Verdict::Unknown);
        assert_eq!(reject(3.0, &t), Verdict::Known);

        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        let t = Threshold::from_quantile(&scores, DEFAULT_QUANTILE).unwrap();
        assert!((t.eta - 95.05).abs() < 1e-9);
        assert_eq!(reject(96.0, &t), Verdict::Unknown);
        assert!(Threshold::from_quantile(&[1.0], 0.5).is_err());
    }

    #[test]
    fn support_calibration() {
        let mut rng = RngState::new(13);
        let head = TransformHead::init(HeadKind::LayerNorm, 4, &mut rng).unwrap();
        let supports = random_matrix(&mut rng, 6, 4);
        let p = PrototypeSet::new(random_matrix(&mut rng, 3, 4)).unwrap();
        let scorer = SnatcherScorer::new(&head, &p, &TransformContext::none()).unwrap();
        let t = Threshold::from_supports(&scorer, &supports, 0.5).unwrap();
        assert_eq!(t.calibration, Calibration::Quantile { q: 0.5, samples: 6 });
        assert!(t.eta >= 0.0);
    }

    #[test]
    fn detector_lists_parse() {
        assert_eq!(
            DetectorKind::parse_list("distance,snatcher").unwrap(),
            vec![DetectorKind::Distance, DetectorKind::Snatcher]
        );
        assert!(DetectorKind::parse_list("distance,nope").is_err());
        assert!(DetectorKind::parse_list("").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn scores_invariant_under_relabeling(seed in 0u64..10_000) {
            let mut rng = RngState::new(seed);
            let p = PrototypeSet::new(random_matrix(&mut rng, 5, 6)).unwrap();
            let supports = random_matrix(&mut rng, 10, 6);
            let ctx = TransformContext::with_supports(&supports);
            let queries = random_matrix(&mut rng, 4, 6);
            let mut order: Vec<usize> = (0..5).collect();
            for i in (1..5).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let relabeled = p.permuted(&order);
            for kind in HeadKind::ALL {
                let mut head = TransformHead::init(kind, 6, &mut rng).unwrap();
                head.jitter(&mut rng, 0.2);
                let a = SnatcherScorer::new(&head, &p, &ctx).unwrap();
                let b = SnatcherScorer::new(&head, &relabeled, &ctx).unwrap();
                for q in queries.iter_rows() {
                    let (x, y) = (a.score(q).unwrap(), b.score(q).unwrap());
                    prop_assert!(x.score >= 0.0);
                    prop_assert!((x.score - y.score).abs() <= 1e-9, "{}: {} vs {}", kind, x.score, y.score);
                    prop_assert_eq!(order[y.predicted_class], x.predicted_class);
                }
            }
        }
    }
}
