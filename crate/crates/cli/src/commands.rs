use std::fs;
use std::path::{Path, PathBuf};

use fsosr_core::checkpoint::Checkpoint;
use fsosr_core::classifier::EncoderSpec;
use fsosr_core::detector::DetectorKind;
use fsosr_core::episodes::{
    generate_synthetic_dataset, render_feature_file, sample_episode, EpisodeShape, FeatureSource, SyntheticSpec,
};
use fsosr_core::evaluation::{
    render_report_csv, render_report_table, render_scores_csv, report_rows, sweep, EvalConfig, EvalSources,
    SweepCell, SweepHead,
};
use fsosr_core::numerics::{derive_seed, RngState};
use fsosr_core::training::{
    grad_check, render_trace_csv, train, GradCheckConfig, LossConfig, TrainConfig, ValidationConfig,
};
use fsosr_core::transforms::{HeadConfig, HeadKind, TransformHead};

use crate::args::{
    EncoderArg, EvalArgs, GenDataArgs, GradCheckArgs, ShapeArgs, SourceArgs, SweepArgs, SyntheticArgs, TrainArgs,
};

/// Why a command stopped; each maps to one exit status.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or inputs, detected before any output is written.
    Invalid(String),
    /// Something went wrong while the command was running.
    Runtime(String),
    GradCheck,
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::GradCheck => 3,
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn invalid(e: impl ToString) -> Failure {
    Failure::Invalid(e.to_string())
}

fn runtime(e: impl ToString) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Writes `bytes` to `path`, creating parent directories.
fn emit(path: &Path, bytes: &[u8]) -> Outcome<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn synthetic_spec(a: &SyntheticArgs) -> Outcome<SyntheticSpec> {
    let spec = SyntheticSpec {
        classes: a.classes,
        dim: a.dim,
        scale: a.scale,
        sigma: a.sigma,
        per_class: a.per_class,
    };
    spec.validate().map_err(invalid)?;
    Ok(spec)
}

fn shape(a: &ShapeArgs) -> EpisodeShape {
    EpisodeShape {
        way: a.way,
        shot: a.shot,
        query: a.query,
        unknown_classes: a.unknown_classes,
        unknown_per_class: a.unknown_per_class,
    }
}

fn head_config(hidden: Option<usize>) -> HeadConfig {
    HeadConfig {
        hidden,
        ..HeadConfig::default()
    }
}

fn init_head(kind: HeadKind, dim: usize, hidden: Option<usize>, seed: u64) -> Outcome<TransformHead> {
    let mut rng = RngState::derived(seed, "head-init", 0);
    TransformHead::init_with(kind, dim, &head_config(hidden), &mut rng).map_err(invalid)
}

fn init_encoder(kind: EncoderArg, dim: usize, hidden: usize, seed: u64) -> Outcome<EncoderSpec> {
    match kind {
        EncoderArg::Identity => Ok(EncoderSpec::Identity),
        EncoderArg::Mlp => {
            let mut rng = RngState::derived(seed, "encoder-init", 0);
            EncoderSpec::mlp(&[dim, hidden, dim], &mut rng).map_err(invalid)
        }
    }
}

enum Sources {
    Single(FeatureSource),
    Pair(FeatureSource, FeatureSource),
}

impl Sources {
    fn view(&self) -> EvalSources<'_> {
        match self {
            Sources::Single(s) => EvalSources::Single(s),
            Sources::Pair(k, u) => EvalSources::CrossDomain { known: k, unknown: u },
        }
    }

    fn dim(&self) -> Outcome<usize> {
        self.view().dim().map_err(invalid)
    }
}

fn load_sources(a: &SourceArgs, seed: u64) -> Outcome<Sources> {
    let load = |p: &PathBuf| FeatureSource::from_file(p).map_err(invalid);
    match (&a.data, &a.known_source, &a.unknown_source) {
        (Some(p), _, _) => Ok(Sources::Single(load(p)?)),
        (None, Some(k), Some(u)) => Ok(Sources::Pair(load(k)?, load(u)?)),
        _ => {
            let spec = synthetic_spec(&a.synthetic)?;
            let mut rng = RngState::new(a.data_seed.unwrap_or(seed));
            Ok(Sources::Single(FeatureSource::synthetic(&mut rng, spec).map_err(invalid)?))
        }
    }
}

fn detectors(list: &str) -> Outcome<Vec<DetectorKind>> {
    DetectorKind::parse_list(list).map_err(invalid)
}

fn parse_shots(list: &str) -> Outcome<Vec<usize>> {
    let shots = list
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .ok()
                .filter(|&k| k > 0)
                .ok_or_else(|| invalid(format!("invalid shot count {s:?}")))
        })
        .collect::<Outcome<Vec<_>>>()?;
    Ok(shots)
}

fn check_eval_classes(sources: &Sources, shape: &EpisodeShape) -> Outcome<()> {
    let (known, unknown) = match sources {
        Sources::Single(s) => (s.class_count(), s.class_count()),
        Sources::Pair(k, u) => (k.class_count(), u.class_count()),
    };
    let need_known = match sources {
        Sources::Single(_) => shape.way + shape.unknown_classes,
        Sources::Pair(..) => shape.way,
    };
    if known < need_known || unknown < shape.unknown_classes {
        return Err(invalid(format!(
            "episodes need {} known and {} unknown classes; the data has {known} and {unknown}",
            shape.way, shape.unknown_classes
        )));
    }
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> Outcome<()> {
    let spec = synthetic_spec(&a.synthetic)?;
    let data = generate_synthetic_dataset(&mut RngState::new(a.seed), &spec).map_err(invalid)?;
    emit(&a.out, render_feature_file(&data).as_bytes())?;
    println!("wrote {} rows (dim={}) to {}", data.len(), data.dim(), a.out.display());
    Ok(())
}

pub fn train_cmd(a: &TrainArgs) -> Outcome<()> {
    let source = match load_sources(&a.source, a.seed)? {
        Sources::Single(s) => s,
        Sources::Pair(..) => return Err(invalid("training takes a single source, not --known-source/--unknown-source")),
    };
    let shape = shape(&a.shape);
    let (train_src, val_src) = if a.val_classes > 0 {
        let (t, v) = source.dataset().split_classes(a.val_classes).map_err(invalid)?;
        let val = FeatureSource::in_memory(v);
        check_eval_classes(&Sources::Single(val.clone()), &shape)
            .map_err(|e| invalid(format!("validation split: {}", message(&e))))?;
        (FeatureSource::in_memory(t), Some(val))
    } else {
        (source, None)
    };
    if train_src.class_count() < shape.way {
        return Err(invalid(format!(
            "training needs at least {} classes, the data has {}",
            shape.way,
            train_src.class_count()
        )));
    }
    let dim = train_src.dim();
    let head = init_head(a.head, dim, a.hidden, a.seed)?;
    let encoder = init_encoder(a.encoder, dim, a.encoder_hidden, a.seed)?;
    let cfg = TrainConfig {
        episodes: a.episodes,
        shape: shape.closed_set(),
        lr_transform: a.lr_transform,
        lr_encoder: a.lr_encoder,
        loss: LossConfig {
            temperature: a.temperature,
            lambda: a.lambda,
        },
        lr_decay: a.lr_decay,
        decay_interval: a.decay_every,
        seed: a.seed,
        validation: ValidationConfig {
            every: a.val_every,
            episodes: a.val_episodes,
            shape,
        },
    };
    cfg.validate().map_err(invalid)?;
    if val_src.is_some() && a.val_episodes == 0 {
        return Err(invalid("--val-episodes must be positive when validating"));
    }

    let out = train(&train_src, val_src.as_ref(), head, encoder, &cfg).map_err(runtime)?;
    let name = a.name.clone().unwrap_or_else(|| a.head.name().to_string());
    let ck = Checkpoint {
        head: out.head,
        encoder: out.encoder,
        step: out.selected_step as u64,
        seed: a.seed,
    };
    let ck_path = a.out.join("checkpoints").join(format!("{name}.ckpt"));
    let trace_path = a.out.join("traces").join(format!("{name}.csv"));
    emit(&ck_path, &ck.to_bytes())?;
    emit(&trace_path, render_trace_csv(&out.trace).as_bytes())?;
    if let Some(last) = out.trace.last() {
        println!("final loss {:.6} after {} episodes", last.loss.total, out.trace.len());
    }
    for v in &out.validation {
        println!("validation step {:>6}  auroc {:.4}", v.step, v.auroc);
    }
    println!("selected step {}", out.selected_step);
    println!("checkpoint {}", ck_path.display());
    println!("trace {}", trace_path.display());
    Ok(())
}

fn message(f: &Failure) -> String {
    match f {
        Failure::Invalid(m) | Failure::Runtime(m) => m.clone(),
        Failure::GradCheck => "gradient check failed".into(),
    }
}

fn load_checkpoint(path: &Path, data_dim: usize) -> Outcome<Checkpoint> {
    let ck = Checkpoint::load(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    ck.ensure_input_dim(data_dim)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok(ck)
}

fn write_reports(out: &Path, name: &str, cells: &[SweepCell], dets: &[DetectorKind]) -> Outcome<()> {
    let rows = report_rows(cells, dets);
    let table = render_report_table(&rows);
    let csv_path = out.join("reports").join(format!("{name}.csv"));
    let txt_path = out.join("reports").join(format!("{name}.txt"));
    emit(&csv_path, render_report_csv(&rows).as_bytes())?;
    emit(&txt_path, table.as_bytes())?;
    print!("{table}");
    println!("report {}", csv_path.display());
    Ok(())
}

pub fn eval_cmd(a: &EvalArgs) -> Outcome<()> {
    let sources = load_sources(&a.source, a.seed)?;
    let dim = sources.dim()?;
    let shape = shape(&a.shape);
    let (label, head, encoder) = match (&a.checkpoint, a.head) {
        (Some(p), _) => {
            let ck = load_checkpoint(p, dim)?;
            (stem(p), ck.head, ck.encoder)
        }
        (None, kind) => {
            let kind = kind.unwrap_or(HeadKind::Identity);
            (kind.name().to_string(), init_head(kind, dim, a.hidden, a.seed)?, EncoderSpec::Identity)
        }
    };
    let dets = detectors(&a.detectors)?;
    let cfg = EvalConfig {
        episodes: a.episodes,
        shape,
        temperature: a.temperature,
        seed: a.seed,
        detectors: dets.clone(),
        keep_scores: a.dump_scores,
    };
    cfg.validate().map_err(invalid)?;
    check_eval_classes(&sources, &shape)?;

    let heads = [SweepHead { label, head, encoder }];
    let cells = sweep(&heads, &[shape], sources.view(), &cfg);
    if let Err(e) = &cells[0].outcome {
        return Err(runtime(e));
    }
    write_reports(&a.out, &a.name, &cells, &dets)?;
    if a.dump_scores {
        let summary = cells[0].outcome.as_ref().expect("checked above");
        let path = a.out.join("scores").join(format!("{}.csv", a.name));
        emit(&path, render_scores_csv(&summary.scores).as_bytes())?;
        println!("scores {}", path.display());
    }
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn sweep_cmd(a: &SweepArgs) -> Outcome<()> {
    let sources = load_sources(&a.source, a.seed)?;
    let dim = sources.dim()?;
    let mut heads = Vec::new();
    for p in &a.checkpoint {
        let ck = load_checkpoint(p, dim)?;
        heads.push(SweepHead {
            label: stem(p),
            head: ck.head,
            encoder: ck.encoder,
        });
    }
    if let Some(list) = &a.heads {
        for name in list.split(',') {
            let kind: HeadKind = name.trim().parse().map_err(invalid)?;
            heads.push(SweepHead {
                label: kind.name().to_string(),
                head: init_head(kind, dim, a.hidden, a.seed)?,
                encoder: EncoderSpec::Identity,
            });
        }
    }
    if heads.is_empty() {
        return Err(invalid("sweep needs at least one --checkpoint or --heads entry"));
    }
    let base = shape(&a.shape);
    let shapes: Vec<EpisodeShape> = parse_shots(&a.shots)?
        .into_iter()
        .map(|shot| EpisodeShape { shot, ..base })
        .collect();
    let dets = detectors(&a.detectors)?;
    let cfg = EvalConfig {
        episodes: a.episodes,
        shape: base,
        temperature: a.temperature,
        seed: a.seed,
        detectors: dets.clone(),
        keep_scores: false,
    };
    for s in &shapes {
        EvalConfig { shape: *s, ..cfg.clone() }.validate().map_err(invalid)?;
    }
    check_eval_classes(&sources, &base)?;

    let cells = sweep(&heads, &shapes, sources.view(), &cfg);
    write_reports(&a.out, &a.name, &cells, &dets)?;
    let failed = cells.iter().filter(|c| c.outcome.is_err()).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed", cells.len());
    }
    Ok(())
}

pub fn grad_check_cmd(a: &GradCheckArgs) -> Outcome<()> {
    let shape = EpisodeShape {
        way: a.way,
        shot: a.shot,
        query: a.query,
        unknown_classes: 0,
        unknown_per_class: 0,
    };
    shape.validate().map_err(invalid)?;
    let spec = SyntheticSpec {
        classes: a.way.max(2),
        dim: a.dim,
        scale: 1.5,
        sigma: 1.0,
        per_class: a.shot + a.query,
    };
    spec.validate().map_err(invalid)?;
    let source = FeatureSource::synthetic(&mut RngState::derived(a.seed, "grad-check-data", 0), spec).map_err(invalid)?;
    let episode = sample_episode(&mut RngState::new(derive_seed(a.seed, "grad-check-episode", 0)), &source, &shape)
        .map_err(invalid)?;
    let mut head = init_head(a.head, a.dim, a.hidden, a.seed)?;
    // Perturb away from the symmetric initialization so every term is exercised.
    fsosr_core::params::Params::jitter(&mut head, &mut RngState::derived(a.seed, "grad-check-jitter", 0), 0.2);
    let encoder = init_encoder(a.encoder, a.dim, a.encoder_hidden, a.seed)?;
    let cfg = GradCheckConfig {
        loss: LossConfig {
            temperature: a.temperature,
            lambda: a.lambda,
        },
        corrupt: a.corrupt_gradient,
        ..GradCheckConfig::default()
    };
    cfg.loss.validate().map_err(invalid)?;

    let report = grad_check(&head, &encoder, &episode, &cfg).map_err(runtime)?;
    if report.is_empty() {
        println!("no parameters");
        return Ok(());
    }
    let width = report.groups.iter().map(|g| g.name.len()).max().unwrap_or(0);
    for g in &report.groups {
        println!(
            "{:<width$}  {:>6}  {:.3e}  {}",
            g.name,
            g.size,
            g.max_rel_error,
            if g.passed { "ok" } else { "FAIL" }
        );
    }
    println!("max relative error {:.3e} (tolerance {:e})", report.max_rel_error(), report.tolerance);
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::GradCheck)
    }
}
