//! One PASS/FAIL line per acceptance criterion. Exits nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use fsosr_core::checkpoint::Checkpoint;
use fsosr_core::classifier::{EncodedEpisode, EncoderSpec, PrototypeSet};
use fsosr_core::detector::{distance_score, snatcher_score, DetectorKind};
use fsosr_core::episodes::{sample_episode, EpisodeShape, FeatureSource, SyntheticSpec};
use fsosr_core::evaluation::{
    auroc, evaluate, render_report_csv, render_scores_csv, report_rows, sweep, EvalConfig, EvalSources, SweepHead,
};
use fsosr_core::numerics::{Matrix, RngState};
use fsosr_core::params::Params;
use fsosr_core::training::{grad_check, train, GradCheckConfig, TrainConfig, ValidationConfig};
use fsosr_core::transforms::{
    instance_norm_forward, layer_norm_forward, task_norm_with_alpha, HeadKind, NormParams, TransformContext,
    TransformHead,
};
use rand::Rng;

type Outcome = Result<String, String>;

fn synthetic(seed: u64, classes: usize, dim: usize, scale: f64, per_class: usize) -> FeatureSource {
    let spec = SyntheticSpec {
        classes,
        dim,
        scale,
        sigma: 1.0,
        per_class,
    };
    FeatureSource::synthetic(&mut RngState::new(seed), spec).expect("valid synthetic spec")
}

fn random_matrix(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn jittered(kind: HeadKind, dim: usize, rng: &mut RngState) -> TransformHead {
    let mut head = TransformHead::init(kind, dim, rng).unwrap();
    head.jitter(rng, 0.3);
    head
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, rest: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..rest.len() {
            let x = rest.remove(i);
            prefix.push(x);
            go(prefix, rest, out);
            prefix.pop();
            rest.insert(i, x);
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut (0..n).collect(), &mut out);
    out
}

fn identity_equivalence() -> Outcome {
    let source = synthetic(11, 20, 16, 2.0, 40);
    let head = TransformHead::init(HeadKind::Identity, 16, &mut RngState::new(0)).unwrap();
    let enc = EncoderSpec::Identity;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in 0..30 {
        let ep = sample_episode(&mut RngState::new(100 + i), &source, &EpisodeShape::default()).unwrap();
        let encoded = EncodedEpisode::new(&enc, &ep).unwrap();
        let protos = encoded.prototypes();
        let transformed = head.forward(&protos, &TransformContext::none()).unwrap();
        for q in encoded.known.iter_rows().chain(encoded.unknown.iter_rows()) {
            let s = snatcher_score(q, &protos, &head, &TransformContext::none()).unwrap();
            let d = distance_score(q, &transformed).unwrap();
            if s.predicted_class != d.predicted_class {
                return Err(format!("episode {i}: predictions differ"));
            }
            worst = worst.max((s.score - d.score).abs());
            checked += 1;
        }
    }
    if worst > 1e-12 {
        return Err(format!("max |snatcher − distance| = {worst:e}"));
    }
    let cfg = EvalConfig {
        episodes: 100,
        seed: 5,
        detectors: vec![DetectorKind::Distance, DetectorKind::Snatcher],
        ..EvalConfig::default()
    };
    let summary = evaluate(EvalSources::Single(&source), &enc, &head, &cfg).unwrap();
    let a = summary.auroc(DetectorKind::Distance).unwrap();
    let b = summary.auroc(DetectorKind::Snatcher).unwrap();
    if a != b {
        return Err(format!("AUROC {} vs {}", a.mean, b.mean));
    }
    for r in &summary.per_episode {
        if r.auroc[0].1 != r.auroc[1].1 {
            return Err(format!("episode {} AUROC differs", r.index));
        }
    }
    Ok(format!("{checked} queries, max diff {worst:e}, AUROC {:.4} on both", a.mean))
}

fn gradient_correctness() -> Outcome {
    let shape = EpisodeShape {
        way: 4,
        shot: 1,
        query: 2,
        unknown_classes: 0,
        unknown_per_class: 0,
    };
    let heads = [
        HeadKind::DeepSets,
        HeadKind::Attention,
        HeadKind::LayerNorm,
        HeadKind::InstanceNorm,
        HeadKind::TaskNorm,
        HeadKind::Ltn,
    ];
    let mut worst = 0.0f64;
    let mut groups = 0;
    for seed in 0..20u64 {
        let source = synthetic(1000 + seed, 6, 6, 1.5, 8);
        let ep = sample_episode(&mut RngState::new(seed), &source, &shape).unwrap();
        let mut rng = RngState::new(2000 + seed);
        for kind in heads {
            let head = jittered(kind, 6, &mut rng);
            let encoder = if seed % 2 == 0 {
                EncoderSpec::mlp(&[6, 8, 6], &mut rng).unwrap()
            } else {
                EncoderSpec::Identity
            };
            let report = grad_check(&head, &encoder, &ep, &GradCheckConfig::default()).unwrap();
            if let Some(g) = report.failing().next() {
                return Err(format!("seed {seed} head {kind}: {} rel error {:e}", g.name, g.max_rel_error));
            }
            worst = worst.max(report.max_rel_error());
            groups += report.groups.len();
        }
        // The encoder gradient on its own, behind the parameter-free identity head.
        let head = TransformHead::init(HeadKind::Identity, 6, &mut rng).unwrap();
        let encoder = EncoderSpec::mlp(&[6, 8, 6], &mut rng).unwrap();
        let report = grad_check(&head, &encoder, &ep, &GradCheckConfig::default()).unwrap();
        if !report.passed() || report.is_empty() {
            return Err(format!("seed {seed} mlp encoder: rel error {:e}", report.max_rel_error()));
        }
        worst = worst.max(report.max_rel_error());
        groups += report.groups.len();
    }
    Ok(format!("{groups} parameter groups over 20 seeds, max rel error {worst:e}"))
}

fn permutation_equivariance() -> Outcome {
    let perms = permutations(5);
    let mut worst = 0.0f64;
    for (k, kind) in HeadKind::ALL.into_iter().enumerate() {
        let mut rng = RngState::new(300 + k as u64);
        let head = jittered(kind, 8, &mut rng);
        let protos = PrototypeSet::new(random_matrix(&mut rng, 5, 8)).unwrap();
        let supports = random_matrix(&mut rng, 10, 8);
        let ctx = TransformContext::with_supports(&supports);
        let base = head.forward(&protos, &ctx).unwrap();
        for perm in &perms {
            let lhs = head.forward(&protos.permuted(perm), &ctx).unwrap();
            let rhs = base.permuted(perm);
            worst = worst.max(max_abs_diff(lhs.matrix(), rhs.matrix()));
        }
        let queries = random_matrix(&mut rng, 12, 8);
        for perm in perms.iter().step_by(7) {
            let relabeled = protos.permuted(perm);
            for q in queries.iter_rows() {
                let a = snatcher_score(q, &protos, &head, &ctx).unwrap();
                let b = snatcher_score(q, &relabeled, &head, &ctx).unwrap();
                if perm[b.predicted_class] != a.predicted_class {
                    return Err(format!("{kind}: relabeled prediction moved"));
                }
                worst = worst.max((a.score - b.score).abs());
            }
        }
    }
    if worst > 1e-9 {
        return Err(format!("max deviation {worst:e}"));
    }
    Ok(format!("7 heads × 120 permutations, max deviation {worst:e}"))
}

fn normalization_moments() -> Outcome {
    let mut worst = 0.0f64;
    let eps = 1e-5;
    for seed in 0..20u64 {
        let mut rng = RngState::new(400 + seed);
        let p = PrototypeSet::new(random_matrix(&mut rng, 5, 8)).unwrap();
        let supports = random_matrix(&mut rng, 9, 8);
        let plain = NormParams::identity(8, eps);

        let ln = layer_norm_forward(&p, &plain).unwrap();
        for (row, src) in ln.matrix().iter_rows().zip(p.matrix().iter_rows()) {
            let (m, v) = moments(row);
            let (_, raw) = moments(src);
            worst = worst.max(m.abs()).max((v - raw / (raw + eps)).abs());
        }

        let inorm = instance_norm_forward(&p, &plain).unwrap();
        for d in 0..8 {
            let col: Vec<f64> = (0..5).map(|c| inorm.matrix().get(c, d)).collect();
            worst = worst.max(moments(&col).0.abs());
        }

        // α = 1: per-dimension moments of the supports.
        let bn = task_norm_with_alpha(&p, &plain, &supports, 1.0).unwrap();
        for d in 0..8 {
            let col: Vec<f64> = (0..9).map(|r| supports.get(r, d)).collect();
            let (m, v) = moments(&col);
            for c in 0..5 {
                let want = (p.matrix().get(c, d) - m) / (v + eps).sqrt();
                worst = worst.max((bn.matrix().get(c, d) - want).abs());
            }
        }
        // α = 0: layer normalization.
        let zero = task_norm_with_alpha(&p, &plain, &supports, 0.0).unwrap();
        worst = worst.max(max_abs_diff(zero.matrix(), ln.matrix()));
    }
    if worst > 1e-9 {
        return Err(format!("max deviation {worst:e}"));
    }
    Ok(format!("20 instances, max deviation {worst:e}"))
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
}

fn auroc_oracle() -> Outcome {
    let mut rng = RngState::new(500);
    for i in 0..200 {
        let nk = rng.random_range(1..=20);
        let nu = rng.random_range(1..=20);
        // Few distinct values so ties are common.
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(0..6) as f64 * 0.5).collect::<Vec<f64>>();
        let known = draw(nk);
        let unknown = draw(nu);
        let mut wins = 0.0;
        for u in &unknown {
            for k in &known {
                wins += if u > k { 1.0 } else if u == k { 0.5 } else { 0.0 };
            }
        }
        let brute = wins / (nk * nu) as f64;
        let ranked = auroc(&known, &unknown).unwrap();
        if ranked != brute {
            return Err(format!("instance {i}: rank {ranked} vs brute {brute}"));
        }
    }
    Ok("200 instances identical".into())
}

struct Trained {
    head: TransformHead,
    encoder: EncoderSpec,
    eval_source: FeatureSource,
}

fn train_ltn() -> Trained {
    let all = synthetic(6060, 80, 64, 3.0, 60);
    let (train_set, eval_set) = all.dataset().split_classes(20).unwrap();
    let train_source = FeatureSource::in_memory(train_set);
    let eval_source = FeatureSource::in_memory(eval_set);
    let mut rng = RngState::new(61);
    let head = TransformHead::init(HeadKind::Ltn, 64, &mut rng).unwrap();
    let cfg = TrainConfig {
        episodes: 2000,
        shape: EpisodeShape {
            shot: 5,
            ..EpisodeShape::default()
        }
        .closed_set(),
        seed: 62,
        validation: ValidationConfig::default(),
        ..TrainConfig::default()
    };
    let out = train(&train_source, None, head, EncoderSpec::Identity, &cfg).unwrap();
    Trained {
        head: out.head,
        encoder: out.encoder,
        eval_source,
    }
}

fn separability(t: &Trained) -> Outcome {
    let cfg = EvalConfig {
        episodes: 200,
        shape: EpisodeShape {
            shot: 5,
            ..EpisodeShape::default()
        },
        seed: 63,
        detectors: vec![DetectorKind::Snatcher],
        ..EvalConfig::default()
    };
    let trained = evaluate(EvalSources::Single(&t.eval_source), &t.encoder, &t.head, &cfg).unwrap();
    let identity = TransformHead::init(HeadKind::Identity, 64, &mut RngState::new(0)).unwrap();
    let base_cfg = EvalConfig {
        detectors: vec![DetectorKind::Distance],
        ..cfg.clone()
    };
    let baseline = evaluate(EvalSources::Single(&t.eval_source), &EncoderSpec::Identity, &identity, &base_cfg).unwrap();
    let s = trained.auroc(DetectorKind::Snatcher).unwrap().mean;
    let d = baseline.auroc(DetectorKind::Distance).unwrap().mean;
    let msg = format!("ltn snatcher AUROC {s:.4}, identity distance AUROC {d:.4}, margin {:+.4}", s - d);
    if s - d >= 0.02 {
        Ok(msg)
    } else {
        Err(format!("{msg} (needs ≥ +0.02)"))
    }
}

fn unknown_count_robustness(t: &Trained) -> Outcome {
    let mut means = Vec::new();
    for upc in [5, 15, 30] {
        let cfg = EvalConfig {
            episodes: 200,
            shape: EpisodeShape {
                shot: 5,
                unknown_per_class: upc,
                ..EpisodeShape::default()
            },
            seed: 64,
            detectors: vec![DetectorKind::Snatcher],
            ..EvalConfig::default()
        };
        let s = evaluate(EvalSources::Single(&t.eval_source), &t.encoder, &t.head, &cfg).unwrap();
        means.push(s.auroc(DetectorKind::Snatcher).unwrap().mean);
    }
    let spread = means.iter().cloned().fold(f64::MIN, f64::max) - means.iter().cloned().fold(f64::MAX, f64::min);
    let msg = format!(
        "AUROC {:.4} / {:.4} / {:.4} at 5 / 15 / 30 unknowns per class, spread {spread:.4}",
        means[0], means[1], means[2]
    );
    if spread <= 0.05 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn pipeline_artifacts() -> (Vec<u8>, String, String) {
    let source = synthetic(77, 24, 10, 2.0, 30);
    let (train_set, eval_set) = source.dataset().split_classes(12).unwrap();
    let train_source = FeatureSource::in_memory(train_set);
    let eval_source = FeatureSource::in_memory(eval_set);
    let mut rng = RngState::new(78);
    let head = TransformHead::init(HeadKind::TaskNorm, 8, &mut rng).unwrap();
    let encoder = EncoderSpec::mlp(&[10, 12, 8], &mut rng).unwrap();
    let cfg = TrainConfig {
        episodes: 60,
        seed: 79,
        ..TrainConfig::default()
    };
    let out = train(&train_source, None, head, encoder, &cfg).unwrap();
    let ck = Checkpoint {
        head: out.head.clone(),
        encoder: out.encoder.clone(),
        step: out.selected_step as u64,
        seed: cfg.seed,
    };
    let eval_cfg = EvalConfig {
        episodes: 20,
        seed: 80,
        keep_scores: true,
        ..EvalConfig::default()
    };
    let summary = evaluate(EvalSources::Single(&eval_source), &out.encoder, &out.head, &eval_cfg).unwrap();
    let heads = vec![
        SweepHead {
            label: "tasknorm".into(),
            head: out.head,
            encoder: out.encoder,
        },
        SweepHead {
            label: "identity".into(),
            head: TransformHead::init(HeadKind::Identity, 10, &mut rng).unwrap(),
            encoder: EncoderSpec::Identity,
        },
    ];
    let shapes = [
        EpisodeShape::default(),
        EpisodeShape {
            shot: 5,
            ..EpisodeShape::default()
        },
    ];
    let cells = sweep(&heads, &shapes, EvalSources::Single(&eval_source), &EvalConfig {
        episodes: 10,
        ..eval_cfg
    });
    let report = render_report_csv(&report_rows(&cells, &DetectorKind::ALL));
    (ck.to_bytes(), render_scores_csv(&summary.scores), report)
}

fn determinism() -> Outcome {
    let a = pipeline_artifacts();
    let b = pipeline_artifacts();
    if a.0 != b.0 {
        return Err("checkpoints differ".into());
    }
    if a.1 != b.1 {
        return Err("score dumps differ".into());
    }
    if a.2 != b.2 {
        return Err("report CSVs differ".into());
    }
    Ok(format!(
        "checkpoint {} bytes, {} score lines, {} report lines identical",
        a.0.len(),
        a.1.lines().count(),
        a.2.lines().count()
    ))
}

fn report(id: usize, name: &str, start: Instant, outcome: Outcome) -> bool {
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS criterion {id} {name}: {detail} [{secs:.1}s]");
            true
        }
        Err(detail) => {
            println!("FAIL criterion {id} {name}: {detail} [{secs:.1}s]");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut ok = true;
    let t = Instant::now();
    ok &= report(1, "identity-head equivalence", t, identity_equivalence());
    let t = Instant::now();
    ok &= report(2, "gradient correctness", t, gradient_correctness());
    let t = Instant::now();
    ok &= report(3, "permutation equivariance", t, permutation_equivariance());
    let t = Instant::now();
    ok &= report(4, "normalization moments", t, normalization_moments());
    let t = Instant::now();
    ok &= report(5, "auroc oracle equivalence", t, auroc_oracle());
    let t = Instant::now();
    let trained = train_ltn();
    ok &= report(6, "end-to-end separability", t, separability(&trained));
    let t = Instant::now();
    ok &= report(7, "unknown-count robustness", t, unknown_count_robustness(&trained));
    let t = Instant::now();
    ok &= report(8, "determinism", t, determinism());
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
