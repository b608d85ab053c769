//! Optimizer, schedule, checkpoints and the episodic training driver.

mod checkpoint;
mod config;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use config::{TrainConfig, FIDELITY_LR};
pub use optim::{adamw_step, AdamW, OptimizerState};
pub use schedule::warmup_lr;
pub use trainer::{
    episode_rng, eval_seed, evaluate, fit, EpochReport, EpochSummary, EvalReport, FitOutcome, FitReport, Trainer,
    TEST_PURPOSE, VALID_PURPOSE,
};
