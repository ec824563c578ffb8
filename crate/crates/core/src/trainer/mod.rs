//! Optimizer, training loops (single worker and data-parallel), and
//! rotation-augmented evaluation.

mod adam;
mod eval;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState, StepOutcome};
pub use eval::{evaluate, rollout, EvalConfig, EvalReport};
pub use train::{
    device_sample, dist_train, init_seed, partition_seed, prepare, train, DeviceSample, DistConfig,
    DistTrainOutput, EpochMetrics, EpochSink, PreparedSample, RadiusMode, TrainConfig, TrainOutput,
    DIVERGENCE_LOSS,
};
