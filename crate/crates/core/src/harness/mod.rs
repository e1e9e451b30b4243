//! Training, evaluation protocols, metrics and the ablation driver.

mod ablate;
mod checkpoint;
mod config;
mod eval;
mod optim;
mod report;
mod train;

pub use ablate::{ablate, apply_axes, expand_grid, resolve_axis, AblationReport, AblationRun, GridPoint, GridSpec, AXIS_ALIASES};
pub use checkpoint::{Checkpoint, CheckpointKind, RngState, RngStates, CHECKPOINT_VERSION};
pub use config::{
    Aggregation, DataPolicy, EvalConfig, LossConfig, ModelConfig, OptimConfig, RunConfig, Seeds, TrainConfig,
};
pub use eval::{
    evaluate, expert_similarity, expert_wise_eval, harmonic_mean, logits, metrics_from_logits, pooled_frames,
    pooled_temporal, predict, rank_of, Banks, EvalSettings, ExpertRow, SplitMetrics,
};
pub use optim::{learning_rate, AdamW};
pub use report::{
    evaluate_checkpoint, evaluate_split, expert_wise, fewshot_split, settings_for, Split, run_experiment, run_id, run_on, table, EvalReport, Timing, CLOSE, MIXED,
    MIXED_NO_TFM, ZEROSHOT,
};
pub use train::{init_stack, train, DivergenceDump, Prepared};
