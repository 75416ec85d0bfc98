//! Experiment harness: run configuration, training, checkpointing,
//! evaluation, and the masking / text-perturbation studies, all
//! deterministic given a seed.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod robust;
pub mod sweep;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint};
pub use config::{DataConfig, OptimConfig, RunConfig, TextBackendKind, TextConfig};
pub use eval::{
    evaluate, evaluate_prepared, prepare_category, prepare_category_with_texts, prepare_part,
    CategoryEval, EvalReport, PreparedCategory, PCK_THRESHOLD,
};
pub use robust::{displacement_csv, robustness, DisplacementRow, ModeReport, RobustnessReport};
pub use sweep::{mask_sweep, sweep_csv, SweepRow};
pub use train::{train, EpochMetrics, TrainReport};
