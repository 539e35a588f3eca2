//! Run configuration, checkpoints, the training loop and the command
//! implementations used by the CLI.

mod checkpoint;
mod commands;
mod config;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta,
    CHECKPOINT_MAGIC, FORMAT_VERSION,
};
pub use commands::{cmd_cv, cmd_eval, cmd_gradcam, cmd_synth, cmd_train, evaluate_into, GradcamRequest, SynthSummary};
pub use config::{RunConfig, PRESETS};
pub use train::{argmax, predict_dataset, train, Dataset, EpochStats, OutputLock, TrainOutcome, Trainer, LOG_HEADER};
