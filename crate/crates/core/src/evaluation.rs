//! Accuracy, AUROC and multi-episode aggregation.
//!
//! Episodes are independent given per-episode seeds derived from a root seed.
//! They are evaluated in parallel, collected in index order, and aggregated
//! sequentially, so results do not depend on scheduling.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::classifier::{classify, EncodedEpisode, EncoderSpec, PrototypeSet};
use crate::detector::{distance_score, probability_score, Detection, DetectorKind, SnatcherScorer};
use crate::episodes::{sample_cross_domain_episode, sample_episode, Episode, EpisodeShape, FeatureSource};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Matrix, RngState};
use crate::transforms::{TransformContext, TransformHead};

/// Fraction of known queries classified correctly against `T(P)`.
pub fn episode_accuracy(episode: &Episode, enc: &EncoderSpec, head: &TransformHead, temperature: f64) -> Result<f64> {
    if episode.known_queries.is_empty() {
        return Err(Error::invalid("accuracy needs at least one known query"));
    }
    let ep = EncodedEpisode::new(enc, episode)?;
    let transformed = head.forward(&ep.prototypes(), &TransformContext::with_supports(&ep.supports))?;
    accuracy_against(&ep.known, &ep.known_labels, &transformed, temperature)
}

fn accuracy_against(known: &Matrix, labels: &[usize], protos: &PrototypeSet, temperature: f64) -> Result<f64> {
    let mut correct = 0usize;
    for (q, &y) in known.iter_rows().zip(labels) {
        if classify(q, protos, temperature)?.predicted() == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Probability that a random unknown scores above a random known, ties
/// counting one half. Computed from midranks.
pub fn auroc(known: &[f64], unknown: &[f64]) -> Result<f64> {
    if known.is_empty() || unknown.is_empty() {
        return Err(Error::InsufficientData(format!(
            "auroc needs scores on both sides, got {} known and {} unknown",
            known.len(),
            unknown.len()
        )));
    }
    if known.iter().chain(unknown).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("auroc input".into()));
    }
    let mut all: Vec<(f64, bool)> = known
        .iter()
        .map(|&v| (v, false))
        .chain(unknown.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum keeps midranks integral.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j+1 share the midrank (i + j + 2) / 2.
        let mid2 = (i + j + 2) as u64;
        let unknowns = all[i..=j].iter().filter(|x| x.1).count() as u64;
        rank_sum2 += mid2 * unknowns;
        i = j + 1;
    }
    let (nu, nk) = (unknown.len() as u64, known.len() as u64);
    let u2 = rank_sum2 - nu * (nu + 1);
    Ok((u2 as f64 / 2.0) / (nu * nk) as f64)
}

/// Mean and 95% normal-approximation half-width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// `1.96 · s / √n`; absent for fewer than two values.
    pub ci: Option<f64>,
}

pub fn mean_ci(values: &[f64]) -> Result<Stat> {
    if values.is_empty() {
        return Err(Error::InsufficientData("mean of an empty list".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ci = (values.len() >= 2).then(|| {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        1.96 * var.sqrt() / n.sqrt()
    });
    Ok(Stat { mean, ci })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truth {
    Known,
    Unknown,
}

impl Truth {
    pub fn name(self) -> &'static str {
        match self {
            Truth::Known => "known",
            Truth::Unknown => "unknown",
        }
    }
}

/// One scored query in a score dump.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub episode_id: usize,
    /// Known queries first, then unknown queries.
    pub query_index: usize,
    pub truth: Truth,
    pub predicted_class: usize,
    pub detector: DetectorKind,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub index: usize,
    pub seed: u64,
    pub accuracy: f64,
    /// One entry per requested detector, in request order.
    pub auroc: Vec<(DetectorKind, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub episodes: usize,
    pub shape: EpisodeShape,
    pub temperature: f64,
    pub seed: u64,
    pub detectors: Vec<DetectorKind>,
    /// Keep every per-query score in the summary.
    pub keep_scores: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 600,
            shape: EpisodeShape::default(),
            temperature: crate::classifier::DEFAULT_TEMPERATURE,
            seed: 0,
            detectors: DetectorKind::ALL.to_vec(),
            keep_scores: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::invalid("evaluation needs at least one episode"));
        }
        self.shape.validate()?;
        if self.shape.query == 0 {
            return Err(Error::invalid("evaluation needs at least one known query per class"));
        }
        if self.shape.unknown_classes == 0 {
            return Err(Error::invalid("evaluation needs at least one unknown class"));
        }
        if self.detectors.is_empty() {
            return Err(Error::invalid("no detectors requested"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum EvalSources<'a> {
    Single(&'a FeatureSource),
    /// Known classes from the first source, unknown classes from the second.
    CrossDomain {
        known: &'a FeatureSource,
        unknown: &'a FeatureSource,
    },
}

impl EvalSources<'_> {
    pub fn dim(&self) -> Result<usize> {
        match self {
            EvalSources::Single(s) => Ok(s.dim()),
            EvalSources::CrossDomain { known, unknown } => {
                if known.dim() != unknown.dim() {
                    return Err(Error::dim("cross-domain sources", known.dim(), unknown.dim()));
                }
                Ok(known.dim())
            }
        }
    }

    fn sample(&self, rng: &mut RngState, shape: &EpisodeShape) -> Result<Episode> {
        match self {
            EvalSources::Single(s) => sample_episode(rng, s, shape),
            EvalSources::CrossDomain { known, unknown } => sample_cross_domain_episode(rng, known, unknown, shape),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub episodes: usize,
    pub accuracy: Stat,
    pub auroc: Vec<(DetectorKind, Stat)>,
    pub per_episode: Vec<EpisodeResult>,
    pub scores: Vec<ScoreRecord>,
}

impl EvalSummary {
    pub fn auroc(&self, detector: DetectorKind) -> Option<Stat> {
        self.auroc.iter().find(|(d, _)| *d == detector).map(|(_, s)| *s)
    }
}

/// Seed of evaluation episode `index`.
pub fn eval_episode_seed(root: u64, index: usize) -> u64 {
    derive_seed(root, "eval-episode", index as u64)
}

fn score_all(
    detector: DetectorKind,
    rows: &Matrix,
    transformed: &PrototypeSet,
    scorer: &SnatcherScorer<'_>,
    temperature: f64,
) -> Result<Vec<Detection>> {
    rows.iter_rows()
        .map(|q| match detector {
            DetectorKind::Probability => probability_score(q, transformed, temperature),
            DetectorKind::Distance => distance_score(q, transformed),
            DetectorKind::Snatcher => scorer.score(q),
        })
        .collect()
}

fn run_episode(
    index: usize,
    sources: &EvalSources<'_>,
    enc: &EncoderSpec,
    head: &TransformHead,
    cfg: &EvalConfig,
) -> Result<(EpisodeResult, Vec<ScoreRecord>)> {
    let seed = eval_episode_seed(cfg.seed, index);
    let episode = sources.sample(&mut RngState::new(seed), &cfg.shape)?;
    let ep = EncodedEpisode::new(enc, &episode)?;
    let protos = ep.prototypes();
    let ctx = TransformContext::with_supports(&ep.supports);
    let scorer = SnatcherScorer::new(head, &protos, &ctx)?;
    let transformed = scorer.transformed().clone();
    let accuracy = accuracy_against(&ep.known, &ep.known_labels, &transformed, cfg.temperature)?;

    let mut aurocs = Vec::with_capacity(cfg.detectors.len());
    let mut records = Vec::new();
    for &det in &cfg.detectors {
        let known = score_all(det, &ep.known, &transformed, &scorer, cfg.temperature)?;
        let unknown = score_all(det, &ep.unknown, &transformed, &scorer, cfg.temperature)?;
        let ks: Vec<f64> = known.iter().map(|d| d.score).collect();
        let us: Vec<f64> = unknown.iter().map(|d| d.score).collect();
        aurocs.push((det, auroc(&ks, &us)?));
        if cfg.keep_scores {
            let tagged = known
                .iter()
                .map(|d| (Truth::Known, d))
                .chain(unknown.iter().map(|d| (Truth::Unknown, d)));
            for (qi, (truth, d)) in tagged.enumerate() {
                records.push(ScoreRecord {
                    episode_id: index,
                    query_index: qi,
                    truth,
                    predicted_class: d.predicted_class,
                    detector: det,
                    score: d.score,
                });
            }
        }
    }
    Ok((
        EpisodeResult {
            index,
            seed,
            accuracy,
            auroc: aurocs,
        },
        records,
    ))
}

/// Evaluates `cfg.episodes` seeded episodes and aggregates them.
pub fn evaluate(
    sources: EvalSources<'_>,
    enc: &EncoderSpec,
    head: &TransformHead,
    cfg: &EvalConfig,
) -> Result<EvalSummary> {
    cfg.validate()?;
    let dim = enc.output_dim(sources.dim()?);
    if let Some(input) = enc.input_dim() {
        if input != sources.dim()? {
            return Err(Error::dim("encoder input vs data", input, sources.dim()?));
        }
    }
    if dim != head.dim() {
        return Err(Error::dim("head vs data", head.dim(), dim));
    }
    let outputs: Vec<Result<(EpisodeResult, Vec<ScoreRecord>)>> = (0..cfg.episodes)
        .into_par_iter()
        .map(|i| run_episode(i, &sources, enc, head, cfg))
        .collect();
    let mut per_episode = Vec::with_capacity(cfg.episodes);
    let mut scores = Vec::new();
    for out in outputs {
        let (r, s) = out?;
        per_episode.push(r);
        scores.extend(s);
    }
    let accs: Vec<f64> = per_episode.iter().map(|r| r.accuracy).collect();
    let mut auroc_stats = Vec::with_capacity(cfg.detectors.len());
    for (k, &det) in cfg.detectors.iter().enumerate() {
        let vals: Vec<f64> = per_episode.iter().map(|r| r.auroc[k].1).collect();
        auroc_stats.push((det, mean_ci(&vals)?));
    }
    Ok(EvalSummary {
        episodes: cfg.episodes,
        accuracy: mean_ci(&accs)?,
        auroc: auroc_stats,
        per_episode,
        scores,
    })
}

/// A labelled head evaluated in a sweep.
#[derive(Debug, Clone)]
pub struct SweepHead {
    pub label: String,
    pub head: TransformHead,
    pub encoder: EncoderSpec,
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub head: String,
    pub shape: EpisodeShape,
    pub outcome: std::result::Result<EvalSummary, String>,
}

/// Evaluates every head on every shape with all requested detectors. A failing
/// cell is recorded and the sweep continues.
pub fn sweep(
    heads: &[SweepHead],
    shapes: &[EpisodeShape],
    sources: EvalSources<'_>,
    base: &EvalConfig,
) -> Vec<SweepCell> {
    let mut cells = Vec::with_capacity(heads.len() * shapes.len());
    for h in heads {
        for &shape in shapes {
            let cfg = EvalConfig {
                shape,
                ..base.clone()
            };
            cells.push(SweepCell {
                head: h.label.clone(),
                shape,
                outcome: evaluate(sources, &h.encoder, &h.head, &cfg).map_err(|e| e.to_string()),
            });
        }
    }
    cells
}

/// One report row: a (cell, detector) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub cell_id: usize,
    pub head: String,
    pub detector: DetectorKind,
    pub shape: EpisodeShape,
    pub accuracy: Option<Stat>,
    pub auroc: Option<Stat>,
    pub episodes: usize,
    pub error: Option<String>,
}

pub fn report_rows(cells: &[SweepCell], detectors: &[DetectorKind]) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for (cell_id, cell) in cells.iter().enumerate() {
        for &det in detectors {
            rows.push(match &cell.outcome {
                Ok(s) => ReportRow {
                    cell_id,
                    head: cell.head.clone(),
                    detector: det,
                    shape: cell.shape,
                    accuracy: Some(s.accuracy),
                    auroc: s.auroc(det),
                    episodes: s.episodes,
                    error: None,
                },
                Err(e) => ReportRow {
                    cell_id,
                    head: cell.head.clone(),
                    detector: det,
                    shape: cell.shape,
                    accuracy: None,
                    auroc: None,
                    episodes: 0,
                    error: Some(e.clone()),
                },
            });
        }
    }
    rows
}

pub const REPORT_HEADER: &str = "cell_id,head,detector,shot,way,acc_mean,acc_ci,auroc_mean,auroc_ci,episodes";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Failed cells leave the numeric fields empty.
pub fn render_report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.cell_id,
            r.head,
            r.detector,
            r.shape.shot,
            r.shape.way,
            opt(r.accuracy.map(|s| s.mean)),
            opt(r.accuracy.and_then(|s| s.ci)),
            opt(r.auroc.map(|s| s.mean)),
            opt(r.auroc.and_then(|s| s.ci)),
            r.episodes
        );
    }
    out
}

fn pct(s: Option<Stat>) -> String {
    match s {
        Some(Stat { mean, ci: Some(ci) }) => format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * ci),
        Some(Stat { mean, ci: None }) => format!("{:.2}", 100.0 * mean),
        None => "-".into(),
    }
}

/// Aligned plain-text table, values in percent.
pub fn render_report_table(rows: &[ReportRow]) -> String {
    let header = ["cell", "head", "detector", "way", "shot", "unk/cls", "acc (%)", "auroc (%)", "episodes"];
    let body: Vec<[String; 9]> = rows
        .iter()
        .map(|r| {
            [
                r.cell_id.to_string(),
                r.head.clone(),
                r.detector.to_string(),
                r.shape.way.to_string(),
                r.shape.shot.to_string(),
                r.shape.unknown_per_class.to_string(),
                pct(r.accuracy),
                match &r.error {
                    Some(e) => format!("FAILED: {e}"),
                    None => pct(r.auroc),
                },
                r.episodes.to_string(),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for row in &body {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub const SCORES_HEADER: &str = "episode_id,query_index,truth,predicted_class,detector,score";

pub fn render_scores_csv(records: &[ScoreRecord]) -> String {
    let mut out = String::from(SCORES_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.episode_id,
            r.query_index,
            r.truth.name(),
            r.predicted_class,
            r.detector,
            r.score
        );
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}
