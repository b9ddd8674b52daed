use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fsosr_core::classifier::DEFAULT_TEMPERATURE;
use fsosr_core::training::{DEFAULT_EPISODES, DEFAULT_LAMBDA, DEFAULT_LR_ENCODER, DEFAULT_LR_TRANSFORM};
use fsosr_core::transforms::HeadKind;

#[derive(Parser, Debug)]
#[command(name = "fsosr", version, about = "Few-shot open-set recognition with transformation-consistency detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic Gaussian feature file.
    GenData(GenDataArgs),
    /// Train a set-transformation head (and optionally an MLP encoder).
    Train(TrainArgs),
    /// Evaluate a head on sampled open-set episodes.
    Eval(EvalArgs),
    /// Evaluate several heads over several shot counts.
    Sweep(SweepArgs),
    /// Compare analytic gradients with central finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SyntheticArgs {
    /// Feature dimension.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Number of classes.
    #[arg(long, default_value_t = 64)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    /// Class means are drawn uniformly from [-scale, scale]^dim.
    #[arg(long, default_value_t = 3.0)]
    pub scale: f64,
    /// Within-class standard deviation.
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
}

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub synthetic: SyntheticArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output feature file.
    #[arg(long, default_value = "features.csv")]
    pub out: PathBuf,
}

/// Where episode features come from: a feature file, a known/unknown file
/// pair, or a synthetic dataset generated from `--data-seed`.
#[derive(Args, Debug, Clone)]
pub struct SourceArgs {
    #[arg(long, conflicts_with_all = ["known_source", "unknown_source"])]
    pub data: Option<PathBuf>,
    /// Known classes for cross-domain evaluation.
    #[arg(long, requires = "unknown_source")]
    pub known_source: Option<PathBuf>,
    /// Unknown classes for cross-domain evaluation.
    #[arg(long, requires = "known_source")]
    pub unknown_source: Option<PathBuf>,
    #[command(flatten)]
    pub synthetic: SyntheticArgs,
    /// Seed of the synthetic dataset; defaults to `--seed`.
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Copy)]
pub struct ShapeArgs {
    #[arg(long, default_value_t = 5)]
    pub way: usize,
    #[arg(long, default_value_t = 1)]
    pub shot: usize,
    /// Known queries per class.
    #[arg(long, default_value_t = 15)]
    pub query: usize,
    #[arg(long, default_value_t = 5)]
    pub unknown_classes: usize,
    #[arg(long, default_value_t = 15)]
    pub unknown_per_class: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderArg {
    Identity,
    Mlp,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub shape: ShapeArgs,
    /// identity, deepsets, attention, ln, in, tasknorm or ltn.
    #[arg(long, default_value = "ltn")]
    pub head: HeadKind,
    /// Hidden width of the deepsets networks.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, value_enum, default_value_t = EncoderArg::Identity)]
    pub encoder: EncoderArg,
    /// Hidden width of the MLP encoder.
    #[arg(long, default_value_t = 64)]
    pub encoder_hidden: usize,
    #[arg(long, default_value_t = DEFAULT_EPISODES)]
    pub episodes: usize,
    #[arg(long, default_value_t = DEFAULT_LR_TRANSFORM)]
    pub lr_transform: f64,
    #[arg(long, default_value_t = DEFAULT_LR_ENCODER)]
    pub lr_encoder: f64,
    /// Multiplier applied to both rates every `--decay-every` episodes.
    #[arg(long, default_value_t = 0.5)]
    pub lr_decay: f64,
    /// Defaults to a quarter of the run.
    #[arg(long)]
    pub decay_every: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    /// Classes held out for checkpoint selection; 0 keeps the final parameters.
    #[arg(long, default_value_t = 10)]
    pub val_classes: usize,
    #[arg(long, default_value_t = 250)]
    pub val_every: usize,
    #[arg(long, default_value_t = 50)]
    pub val_episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// File stem of the checkpoint and trace; defaults to the head name.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub shape: ShapeArgs,
    #[arg(long, conflicts_with = "head")]
    pub checkpoint: Option<PathBuf>,
    /// Untrained head to evaluate instead of a checkpoint.
    #[arg(long)]
    pub head: Option<HeadKind>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, default_value_t = 600)]
    pub episodes: usize,
    #[arg(long, default_value = "probability,distance,snatcher")]
    pub detectors: String,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// File stem of the report and score dump.
    #[arg(long, default_value = "eval")]
    pub name: String,
    /// Also write every query score.
    #[arg(long)]
    pub dump_scores: bool,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub shape: ShapeArgs,
    /// Trained heads, labelled by file stem. Repeatable.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    /// Comma-separated untrained heads, e.g. `identity`.
    #[arg(long)]
    pub heads: Option<String>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Comma-separated shot counts; overrides `--shot`.
    #[arg(long, default_value = "1,5")]
    pub shots: String,
    #[arg(long, default_value_t = 600)]
    pub episodes: usize,
    #[arg(long, default_value = "probability,distance,snatcher")]
    pub detectors: String,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long, default_value = "sweep")]
    pub name: String,
}

#[derive(Args, Debug, Clone)]
pub struct GradCheckArgs {
    #[arg(long)]
    pub head: HeadKind,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, value_enum, default_value_t = EncoderArg::Identity)]
    pub encoder: EncoderArg,
    #[arg(long, default_value_t = 8)]
    pub encoder_hidden: usize,
    #[arg(long, default_value_t = 6)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub way: usize,
    #[arg(long, default_value_t = 2)]
    pub shot: usize,
    #[arg(long, default_value_t = 3)]
    pub query: usize,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Debug aid: doubles the largest analytic gradient entry so the check must fail.
    #[arg(long)]
    pub corrupt_gradient: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn shared_flags_parse() {
        let cli = Cli::try_parse_from([
            "fsosr", "eval", "--head", "tasknorm", "--way", "3", "--unknown-per-class", "30", "--temperature", "16",
        ])
        .unwrap();
        let Command::Eval(a) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(a.head, Some(HeadKind::TaskNorm));
        assert_eq!((a.shape.way, a.shape.shot, a.shape.unknown_per_class), (3, 1, 30));
        assert_eq!(a.temperature, 16.0);
        assert_eq!(a.detectors, "probability,distance,snatcher");
    }

    #[test]
    fn checkpoint_and_head_conflict() {
        assert!(Cli::try_parse_from(["fsosr", "eval", "--checkpoint", "a.ckpt", "--head", "ln"]).is_err());
        assert!(Cli::try_parse_from(["fsosr", "eval", "--known-source", "a.csv"]).is_err());
    }
}
