//! Joint minimax training with gradient reversal, schedules, parameter
//! averaging, early stopping, checkpoints and the hyper-parameter grid.

mod checkpoint;
mod config;
mod run;
mod step;

pub use checkpoint::{Checkpoint, TrainCounters, CHECKPOINT_VERSION};
pub use config::{AdversaryMode, TrainConfig, CONFIG_KEYS};
pub use run::{
    encode_file, fresh_dir, grid_cell_name, resume_training, run_grid, run_training, Event, RunPaths, RunSummary,
    Trainer, MAX_CONSECUTIVE_SKIPS,
};
pub use step::{
    build_loss, lr_schedule, polyak_coefficient, polyak_update, should_stop, train_step, uniform_dropout_mask,
    LossGraph, MaskSpec, StepOutcome, StepReport,
};
