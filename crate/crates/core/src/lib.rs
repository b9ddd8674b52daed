//! Few-shot open-set recognition over embedding vectors.
//!
//! Episodes of N-way K-shot tasks carry known and unknown queries. Prototypes
//! are class means of encoded supports, a permutation-equivariant head
//! transforms the prototype set, and unknown queries are detected by how much
//! swapping them into the set moves the transformed prototypes.

pub mod checkpoint;
pub mod classifier;
pub mod detector;
pub mod episodes;
pub mod error;
pub mod evaluation;
pub mod mlp;
pub mod numerics;
pub mod params;
pub mod training;
pub mod transforms;

pub use checkpoint::Checkpoint;
pub use classifier::{classify, compute_prototypes, encode, ClassProbabilities, EncoderSpec, PrototypeSet};
pub use detector::{
    distance_score, probability_score, reject, snatcher_score, Detection, DetectionScore, DetectorKind,
    SnatcherScorer, Threshold, Verdict,
};
pub use episodes::{
    generate_synthetic_dataset, load_feature_file, sample_episode, Dataset, Episode, EpisodeShape, FeatureSource,
    LabeledExample, SyntheticSpec,
};
pub use error::{Error, Result};
pub use evaluation::{auroc, evaluate, mean_ci, sweep, EvalConfig, EvalSources, EvalSummary};
pub use numerics::{argmax_with_ties, euclidean_sq, softmax, Matrix, RngState, Vector};
pub use params::Params;
pub use training::{grad_check, total_loss, train, GradCheckConfig, LossBreakdown, LossConfig, TrainConfig};
pub use transforms::{transform, transform_backward, HeadKind, TransformContext, TransformHead};
