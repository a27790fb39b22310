//! Model assembly, joint training, evaluation, visual-only inference,
//! checkpoints and ablations.

mod ablate;
mod checkpoint;
mod gradcheck;
mod model;
mod optim;
mod train;

pub use ablate::{ablate, AblationRow, AblationTable, TABLE_SUBSETS};
pub use checkpoint::{config_path, Checkpoint};
pub use gradcheck::{model_gradcheck, ModelGradcheck};
pub use model::{
    audio_trace, build_model, collate, Mode, Model, ModelConfig, Outputs, TrainConfig,
};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use train::{
    argmax_rows, cosine_lr, evaluate, infer_visual_only, train_step, train, EpochMetrics,
    HeadAccuracy, Inference, MetricsLog, TrainOptions, TrainOutcome, EPOCH_CSV_HEADER,
};
