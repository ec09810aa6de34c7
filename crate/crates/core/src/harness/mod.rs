//! Synthetic data, fine-tuning, evaluation and experiment sweeps.

mod data;
mod eval;
mod sweep;
mod train;

pub use data::{make_dataset, Example, SyntheticTask};
pub use eval::{accuracy, evaluate, predict, time_pass, Evaluation, Timing};
pub use sweep::{
    deterministic_part, read_sweep_csv, sweep, write_sweep_csv, ScheduleSpec, SweepConfig, SweepRow, TrainMode, Trial,
    DETERMINISTIC_COLUMNS, SWEEP_HEADER,
};
pub use train::{finetune, Optimizer, TrainConfig, TrainOutcome};

#[cfg(test)]
mod tests;
