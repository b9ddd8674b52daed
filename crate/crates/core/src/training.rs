//! Episodic training of transform heads and the optional MLP encoder.
//!
//! The objective is `CE(known queries vs T(P)) + λ R`. For `R`, every encoded
//! support and known query is appended to the prototype set, the extended set
//! is transformed, and the appended slot is read back. The transformed
//! features are classified against their own class means (the centers), and
//! gradients flow through the centers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::classifier::{class_means, logits_unchecked, EncodedEpisode, EncoderSpec, PrototypeSet};
use crate::detector::DetectorKind;
use crate::episodes::{sample_episode, Episode, EpisodeShape, FeatureSource, LabeledExample};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalConfig, EvalSources};
use crate::mlp::MlpTrace;
use crate::numerics::{axpy, derive_seed, log_sum_exp, softmax_unchecked, Matrix, RngState};
use crate::params::Params;
use crate::transforms::{TransformContext, TransformHead};
use rayon::prelude::*;

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_LR_TRANSFORM: f64 = 0.002;
pub const DEFAULT_LR_ENCODER: f64 = 0.0002;
pub const DEFAULT_EPISODES: usize = 2000;
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Temperature and regularizer weight of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: crate::classifier::DEFAULT_TEMPERATURE,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce_main: f64,
    pub regularizer: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(ce_main: f64, regularizer: f64, lambda: f64) -> Self {
        LossBreakdown {
            ce_main,
            regularizer,
            total: ce_main + lambda * regularizer,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.ce_main.is_finite() && self.regularizer.is_finite() && self.total.is_finite()
    }
}

/// Class means of the transformed supports and known queries.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters {
    pub centers: Matrix,
}

/// Gradients of the objective, shaped like the trained components.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub head: TransformHead,
    pub encoder: EncoderSpec,
}

impl Gradients {
    pub fn all_finite(&self) -> bool {
        self.head.all_finite() && self.encoder.all_finite()
    }
}

/// Mean cross-entropy of `features` against `centers`, and optionally its
/// gradients with respect to both.
fn mean_ce(
    features: &Matrix,
    labels: &[usize],
    centers: &Matrix,
    temperature: f64,
    grads: Option<(&mut Matrix, &mut Matrix)>,
) -> f64 {
    let m = features.rows() as f64;
    let mut loss = 0.0;
    let mut grads = grads;
    for (i, (x, &y)) in features.iter_rows().zip(labels).enumerate() {
        let logits = logits_unchecked(x, centers, temperature);
        loss += log_sum_exp(&logits) - logits[y];
        if let Some((dx, dc)) = grads.as_mut() {
            let probs = softmax_unchecked(&logits);
            for (c, p) in probs.iter().enumerate() {
                let g = (p - if c == y { 1.0 } else { 0.0 }) / m;
                let k = 2.0 * g / temperature;
                let center = centers.row(c);
                let dxr = dx.row_mut(i);
                for d in 0..center.len() {
                    dxr[d] -= k * (x[d] - center[d]);
                }
                let dcr = dc.row_mut(c);
                for d in 0..center.len() {
                    dcr[d] += k * (x[d] - center[d]);
                }
            }
        }
    }
    loss / m
}

fn stacked(a: &Matrix, b: &Matrix) -> Matrix {
    let mut data = a.as_slice().to_vec();
    data.extend_from_slice(b.as_slice());
    Matrix::from_vec(a.rows() + b.rows(), a.cols(), data).expect("same width")
}

fn check_episode(ep: &EncodedEpisode, head: &TransformHead) -> Result<()> {
    if ep.known.rows() == 0 {
        return Err(Error::invalid("training losses need at least one known query"));
    }
    if ep.supports.cols() != head.dim() {
        return Err(Error::dim("encoded feature width vs head", head.dim(), ep.supports.cols()));
    }
    Ok(())
}

/// Transformed features of every support and known query, supports first.
fn regularizer_features(ep: &EncodedEpisode, head: &TransformHead, protos: &PrototypeSet) -> Result<(Matrix, Vec<usize>)> {
    let ctx = TransformContext::with_supports(&ep.supports);
    let all = stacked(&ep.supports, &ep.known);
    let mut labels = ep.support_labels.clone();
    labels.extend_from_slice(&ep.known_labels);
    let mut out = Matrix::zeros(all.rows(), all.cols());
    for (i, f) in all.iter_rows().enumerate() {
        let t = head.forward(&protos.appended(f), &ctx)?;
        out.row_mut(i).copy_from_slice(t.prototype(protos.way()));
    }
    Ok((out, labels))
}

fn encoded_losses(ep: &EncodedEpisode, head: &TransformHead, cfg: &LossConfig) -> Result<LossBreakdown> {
    check_episode(ep, head)?;
    let protos = ep.prototypes();
    let ctx = TransformContext::with_supports(&ep.supports);
    let transformed = head.forward(&protos, &ctx)?;
    let ce = mean_ce(&ep.known, &ep.known_labels, transformed.matrix(), cfg.temperature, None);
    let (feats, labels) = regularizer_features(ep, head, &protos)?;
    let centers = class_means(&feats, &labels, ep.way);
    let r = mean_ce(&feats, &labels, &centers, cfg.temperature, None);
    Ok(LossBreakdown::new(ce, r, cfg.lambda))
}

/// Loss and gradients with respect to the head and the encoded features.
struct EncodedGrads {
    loss: LossBreakdown,
    head: TransformHead,
    d_supports: Matrix,
    d_known: Matrix,
}

fn encoded_grads(ep: &EncodedEpisode, head: &TransformHead, cfg: &LossConfig) -> Result<EncodedGrads> {
    check_episode(ep, head)?;
    let (ns, dim, way) = (ep.supports.rows(), ep.supports.cols(), ep.way);
    let protos = ep.prototypes();
    let ctx = TransformContext::with_supports(&ep.supports);
    let mut g_head = head.zeros_like();
    let mut d_supports = Matrix::zeros(ns, dim);
    let mut d_known = Matrix::zeros(ep.known.rows(), dim);
    let mut d_protos = Matrix::zeros(way, dim);

    let absorb = |g: crate::transforms::TransformGrads, d_supports: &mut Matrix, g_head: &mut TransformHead| {
        g_head.add_scaled(1.0, &g.params);
        if let Some(ds) = g.support_features {
            axpy(d_supports.as_mut_slice(), 1.0, ds.as_slice());
        }
        g.protos
    };

    // Main term.
    let transformed = head.forward(&protos, &ctx)?;
    let mut d_transformed = Matrix::zeros(way, dim);
    let ce = mean_ce(
        &ep.known,
        &ep.known_labels,
        transformed.matrix(),
        cfg.temperature,
        Some((&mut d_known, &mut d_transformed)),
    );
    let g = head.backward(&protos, &ctx, &d_transformed)?;
    let dp = absorb(g, &mut d_supports, &mut g_head);
    axpy(d_protos.as_mut_slice(), 1.0, dp.as_slice());

    // Regularizer.
    let (feats, labels) = regularizer_features(ep, head, &protos)?;
    let centers = class_means(&feats, &labels, way);
    let mut d_feats = Matrix::zeros(feats.rows(), dim);
    let mut d_centers = Matrix::zeros(way, dim);
    let r = mean_ce(&feats, &labels, &centers, cfg.temperature, Some((&mut d_feats, &mut d_centers)));
    let mut counts = vec![0usize; way];
    for &y in &labels {
        counts[y] += 1;
    }
    if cfg.lambda != 0.0 {
        let all = stacked(&ep.supports, &ep.known);
        for (i, f) in all.iter_rows().enumerate() {
            let y = labels[i];
            let mut up = Matrix::zeros(way + 1, dim);
            let last = up.row_mut(way);
            for d in 0..dim {
                last[d] = cfg.lambda * (d_feats.get(i, d) + d_centers.get(y, d) / counts[y] as f64);
            }
            let g = head.backward(&protos.appended(f), &ctx, &up)?;
            let dp = absorb(g, &mut d_supports, &mut g_head);
            axpy(d_protos.as_mut_slice(), 1.0, &dp.as_slice()[..way * dim]);
            let df = dp.row(way);
            if i < ns {
                axpy(d_supports.row_mut(i), 1.0, df);
            } else {
                axpy(d_known.row_mut(i - ns), 1.0, df);
            }
        }
    }

    // Prototypes are class means of the supports.
    let mut shots = vec![0usize; way];
    for &y in &ep.support_labels {
        shots[y] += 1;
    }
    for (i, &y) in ep.support_labels.iter().enumerate() {
        axpy(d_supports.row_mut(i), 1.0 / shots[y] as f64, d_protos.row(y));
    }

    Ok(EncodedGrads {
        loss: LossBreakdown::new(ce, r, cfg.lambda),
        head: g_head,
        d_supports,
        d_known,
    })
}

fn encode_episode(enc: &EncoderSpec, episode: &Episode) -> Result<EncodedEpisode> {
    EncodedEpisode::new(enc, episode)
}

/// Mean cross-entropy of the known queries against the transformed prototypes.
pub fn main_loss(episode: &Episode, enc: &EncoderSpec, head: &TransformHead, temperature: f64) -> Result<f64> {
    let cfg = LossConfig { temperature, lambda: 0.0 };
    cfg.validate()?;
    let ep = encode_episode(enc, episode)?;
    check_episode(&ep, head)?;
    let transformed = head.forward(&ep.prototypes(), &TransformContext::with_supports(&ep.supports))?;
    Ok(mean_ce(&ep.known, &ep.known_labels, transformed.matrix(), temperature, None))
}

/// Centers of the transformed supports and known queries.
pub fn class_centers(episode: &Episode, enc: &EncoderSpec, head: &TransformHead) -> Result<ClassCenters> {
    let ep = encode_episode(enc, episode)?;
    check_episode(&ep, head)?;
    let (feats, labels) = regularizer_features(&ep, head, &ep.prototypes())?;
    Ok(ClassCenters {
        centers: class_means(&feats, &labels, ep.way),
    })
}

/// Mean cross-entropy of the transformed supports and known queries against
/// their class centers.
pub fn regularizer_loss(episode: &Episode, enc: &EncoderSpec, head: &TransformHead, temperature: f64) -> Result<f64> {
    let cfg = LossConfig { temperature, lambda: 0.0 };
    cfg.validate()?;
    let ep = encode_episode(enc, episode)?;
    check_episode(&ep, head)?;
    let (feats, labels) = regularizer_features(&ep, head, &ep.prototypes())?;
    let centers = class_means(&feats, &labels, ep.way);
    Ok(mean_ce(&feats, &labels, &centers, temperature, None))
}

pub fn total_loss(episode: &Episode, enc: &EncoderSpec, head: &TransformHead, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    encoded_losses(&encode_episode(enc, episode)?, head, cfg)
}

fn encoder_backward(
    enc: &EncoderSpec,
    inputs: &[LabeledExample],
    d_out: &Matrix,
    grad: &mut EncoderSpec,
) {
    if let (EncoderSpec::Mlp(m), EncoderSpec::Mlp(g)) = (enc, grad) {
        for (ex, d) in inputs.iter().zip(d_out.iter_rows()) {
            let trace: MlpTrace = m.forward_traced(&ex.feature);
            m.backward(&trace, d, g);
        }
    }
}

/// Objective value and its exact gradients.
pub fn loss_and_grads(
    episode: &Episode,
    enc: &EncoderSpec,
    head: &TransformHead,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Gradients)> {
    cfg.validate()?;
    let ep = encode_episode(enc, episode)?;
    let g = encoded_grads(&ep, head, cfg)?;
    let mut g_enc = enc.zeros_like();
    encoder_backward(enc, &episode.supports, &g.d_supports, &mut g_enc);
    encoder_backward(enc, &episode.known_queries, &g.d_known, &mut g_enc);
    Ok((
        g.loss,
        Gradients {
            head: g.head,
            encoder: g_enc,
        },
    ))
}

/// Periodic held-out evaluation used for model selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationConfig {
    /// Evaluate after every `every` training episodes and after the last one.
    pub every: usize,
    pub episodes: usize,
    pub shape: EpisodeShape,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            every: 250,
            episodes: 50,
            shape: EpisodeShape::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub episodes: usize,
    /// Training episode shape; unknown queries are never drawn.
    pub shape: EpisodeShape,
    pub lr_transform: f64,
    pub lr_encoder: f64,
    pub loss: LossConfig,
    /// Multiplicative learning-rate decay applied every `decay_interval`
    /// episodes.
    pub lr_decay: f64,
    /// Defaults to a quarter of the run.
    pub decay_interval: Option<usize>,
    pub seed: u64,
    pub validation: ValidationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: DEFAULT_EPISODES,
            shape: EpisodeShape::default().closed_set(),
            lr_transform: DEFAULT_LR_TRANSFORM,
            lr_encoder: DEFAULT_LR_ENCODER,
            loss: LossConfig::default(),
            lr_decay: 0.5,
            decay_interval: None,
            seed: 0,
            validation: ValidationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.shape.validate()?;
        if self.shape.query == 0 {
            return Err(Error::invalid("training needs at least one known query per class"));
        }
        for (name, lr) in [("lr_transform", self.lr_transform), ("lr_encoder", self.lr_encoder)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative, got {lr}")));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidArgument(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if self.decay_interval == Some(0) {
            return Err(Error::invalid("decay interval must be positive"));
        }
        if self.validation.every == 0 {
            return Err(Error::invalid("validation interval must be positive"));
        }
        Ok(())
    }

    fn interval(&self) -> usize {
        self.decay_interval.unwrap_or((self.episodes / 4).max(1))
    }

    /// Learning rates in effect at 0-based episode `step`.
    pub fn rates_at(&self, step: usize) -> (f64, f64) {
        let f = self.lr_decay.powi((step / self.interval()) as i32);
        (self.lr_transform * f, self.lr_encoder * f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr_transform: f64,
    pub lr_encoder: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationPoint {
    pub step: usize,
    pub auroc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation head, or the final head without validation data.
    pub head: TransformHead,
    pub encoder: EncoderSpec,
    pub trace: Vec<TracePoint>,
    pub validation: Vec<ValidationPoint>,
    /// Number of episodes applied to the selected parameters.
    pub selected_step: usize,
    pub final_head: TransformHead,
    pub final_encoder: EncoderSpec,
}

/// Seed of training episode `step`.
pub fn episode_seed(root: u64, step: usize) -> u64 {
    derive_seed(root, "train-episode", step as u64)
}

fn validation_auroc(
    source: &FeatureSource,
    enc: &EncoderSpec,
    head: &TransformHead,
    cfg: &TrainConfig,
) -> Result<f64> {
    let eval = EvalConfig {
        episodes: cfg.validation.episodes,
        shape: cfg.validation.shape,
        temperature: cfg.loss.temperature,
        seed: derive_seed(cfg.seed, "validation", 0),
        detectors: vec![DetectorKind::Snatcher],
        keep_scores: false,
    };
    let summary = evaluate(EvalSources::Single(source), enc, head, &eval)?;
    Ok(summary.auroc(DetectorKind::Snatcher).expect("requested detector").mean)
}

/// Plain SGD over freshly sampled episodes.
pub fn train(
    source: &FeatureSource,
    validation: Option<&FeatureSource>,
    head: TransformHead,
    encoder: EncoderSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    head.validate()?;
    let mut head = head;
    let mut encoder = encoder;
    let shape = cfg.shape.closed_set();
    let mut trace = Vec::with_capacity(cfg.episodes);
    let mut checks = Vec::new();
    let mut best: Option<(f64, usize, TransformHead, EncoderSpec)> = None;

    for step in 0..cfg.episodes {
        let seed = episode_seed(cfg.seed, step);
        let abort = |reason: String| Error::TrainingAborted { step, seed, reason };
        let episode = sample_episode(&mut RngState::new(seed), source, &shape)?;
        let (loss, grads) = match loss_and_grads(&episode, &encoder, &head, &cfg.loss) {
            Ok(v) => v,
            Err(Error::NonFinite(what)) => return Err(abort(format!("non-finite {what}"))),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(abort(format!("non-finite loss {loss:?}")));
        }
        if !grads.all_finite() {
            return Err(abort("non-finite gradient".into()));
        }
        let (lr_t, lr_e) = cfg.rates_at(step);
        if lr_t != 0.0 {
            head.add_scaled(-lr_t, &grads.head);
        }
        if lr_e != 0.0 {
            encoder.add_scaled(-lr_e, &grads.encoder);
        }
        if !head.all_finite() || !encoder.all_finite() {
            return Err(abort("parameters became non-finite".into()));
        }
        trace.push(TracePoint {
            step,
            loss,
            lr_transform: lr_t,
            lr_encoder: lr_e,
        });

        let done = step + 1;
        if let Some(val) = validation {
            if done % cfg.validation.every == 0 || done == cfg.episodes {
                let auroc = validation_auroc(val, &encoder, &head, cfg)?;
                checks.push(ValidationPoint { step: done, auroc });
                if best.as_ref().is_none_or(|b| auroc > b.0) {
                    best = Some((auroc, done, head.clone(), encoder.clone()));
                }
            }
        }
    }

    let (sel_head, sel_enc, selected_step) = match best {
        Some((_, step, h, e)) => (h, e, step),
        None => (head.clone(), encoder.clone(), cfg.episodes),
    };
    Ok(TrainOutcome {
        head: sel_head,
        encoder: sel_enc,
        trace,
        validation: checks,
        selected_step,
        final_head: head,
        final_encoder: encoder,
    })
}

pub const TRACE_HEADER: &str = "step,ce_main,regularizer,total,lr_transform,lr_encoder";

pub fn render_trace_csv(trace: &[TracePoint]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for t in trace {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            t.step, t.loss.ce_main, t.loss.regularizer, t.loss.total, t.lr_transform, t.lr_encoder
        );
    }
    out
}

pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[TracePoint]) -> Result<()> {
    fs::write(path, render_trace_csv(trace))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub loss: LossConfig,
    pub step: f64,
    pub tolerance: f64,
    /// Doubles the largest analytic entry before comparing, to confirm the
    /// harness notices a wrong gradient.
    pub corrupt: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            loss: LossConfig::default(),
            step: FD_STEP,
            tolerance: GRAD_TOLERANCE,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub size: usize,
    /// `max |analytic − numeric| / max(1, |analytic|)` over the group.
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn failing(&self) -> impl Iterator<Item = &GroupCheck> {
        self.groups.iter().filter(|g| !g.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares every analytic parameter gradient of the total loss with central
/// finite differences.
pub fn grad_check(
    head: &TransformHead,
    enc: &EncoderSpec,
    episode: &Episode,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    cfg.loss.validate()?;
    if !(cfg.step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (_, grads) = loss_and_grads(episode, enc, head, &cfg.loss)?;
    let mut analytic = grads.head.flatten();
    let head_len = analytic.len();
    analytic.extend(grads.encoder.flatten());
    if cfg.corrupt && !analytic.is_empty() {
        let i = (0..analytic.len())
            .max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs()))
            .expect("non-empty");
        analytic[i] = if analytic[i] == 0.0 { 1.0 } else { 2.0 * analytic[i] };
    }

    let mut groups: Vec<(String, usize)> = Vec::new();
    head.visit("head", &mut |name, _, v| groups.push((name.to_string(), v.len())));
    enc.visit("encoder", &mut |name, _, v| groups.push((name.to_string(), v.len())));

    let encoded = encode_episode(enc, episode)?;
    let h = cfg.step;
    // Each coordinate is independent; results come back in index order.
    let mut numeric = (0..head_len)
        .into_par_iter()
        .map_init(
            || head.clone(),
            |probe, i| {
                probe.nudge(i, h);
                let up = encoded_losses(&encoded, probe, &cfg.loss)?.total;
                probe.nudge(i, -2.0 * h);
                let down = encoded_losses(&encoded, probe, &cfg.loss)?.total;
                probe.nudge(i, h);
                Ok((up - down) / (2.0 * h))
            },
        )
        .collect::<Result<Vec<f64>>>()?;
    let encoder_numeric = (0..analytic.len() - head_len)
        .into_par_iter()
        .map_init(
            || enc.clone(),
            |probe, i| {
                probe.nudge(i, h);
                let up = total_loss(episode, probe, head, &cfg.loss)?.total;
                probe.nudge(i, -2.0 * h);
                let down = total_loss(episode, probe, head, &cfg.loss)?.total;
                probe.nudge(i, h);
                Ok((up - down) / (2.0 * h))
            },
        )
        .collect::<Result<Vec<f64>>>()?;
    numeric.extend(encoder_numeric);

    let mut offset = 0;
    let checks = groups
        .into_iter()
        .map(|(name, size)| {
            let max_rel_error = (offset..offset + size)
                .map(|i| (analytic[i] - numeric[i]).abs() / analytic[i].abs().max(1.0))
                .fold(0.0, f64::max);
            offset += size;
            GroupCheck {
                name,
                size,
                max_rel_error,
                passed: max_rel_error <= cfg.tolerance,
            }
        })
        .collect();
    Ok(GradCheckReport {
        groups: checks,
        tolerance: cfg.tolerance,
    })
}
