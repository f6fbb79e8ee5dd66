//! Experiment harness: configuration, training, evaluation, rendering,
//! checkpoints and ablation presets.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod predictions;
pub mod train;

pub use ablation::{
    ablation_base, run_ablation, AblationCell, AblationPreset, AblationTable, AblationVariant, PRESET_NAMES,
};
pub use checkpoint::{
    build_model, load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader, LoadedCheckpoint,
};
pub use config::{output_root, DataConfig, OptimConfig, RunConfig};
pub use eval::{
    evaluate_model, predict_videos, render_overlay, render_video, score_predictions, track_color, write_ppm,
};
pub use predictions::{
    read_predicted_video, read_prediction_meta, write_predictions, PredictedVideoEntry, PredictionMeta,
};
pub use train::{load_data, train, write_run, Manifest, RunData, StepLog, TrainResult};
