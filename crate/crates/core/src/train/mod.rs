//! Training loop, datasets, checkpoints and the small experiments built on them.

pub mod checkpoint;
pub mod data;
pub mod drift;
pub mod harness;
pub mod loss;
pub mod optim;
pub mod sensitivity;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{generate_synthetic, load_cifar10_binary, Augment, Dataset, SyntheticSpec};
pub use drift::{
    drift_analysis, summarize, DriftReport, DriftSummary, Histogram, LayerDrift, HISTOGRAM_BINS,
};
pub use harness::{
    accuracy, evaluate, train, Cursor, EpochMetrics, MetricsLog, PhaseConfig, PhaseName,
    TrainConfig, Trainer,
};
pub use loss::{distillation_loss, DistillConfig};
pub use optim::{cosine_lr, nag_step, NagConfig, NagState};
pub use sensitivity::{
    builtin_filter, sensitivity_experiment, sensitivity_with, SensitivityConfig, SensitivityPoint,
    DEFAULT_PAIRS,
};
