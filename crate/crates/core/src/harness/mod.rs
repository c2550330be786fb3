//! Run configuration, data splits, optimization, checkpoints and the
//! train / fine-tune / evaluate / sweep workflows.

mod checkpoint;
mod config;
mod optim;
mod split;
mod train;

pub use checkpoint::{copy_params, copy_trunk, EpochRecord, ModelCheckpoint, CHECKPOINT_VERSION};
pub use config::{default_split, Ablations, OptimConfig, RunConfig};
pub use optim::Adam;
pub use split::{few_shot_size, few_shot_subset, split, Split, SplitName};
pub use train::{
    evaluate, evaluate_predictions, finetune, no_log, parse_grid, predict_units, summarize, sweep,
    test_metrics_lenient, train, write_summary_csv, write_sweep_csv, LogSink, SweepRow,
};
