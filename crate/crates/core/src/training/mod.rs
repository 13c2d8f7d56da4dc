//! Synthetic scenes, segmentation metrics, the training loop and the
//! test-time robustness harness.

mod metrics;
mod robustness;
mod synth;
mod train;

pub use metrics::{argmax_rows, evaluate, evaluate_predictions, Metrics};
pub use robustness::{format_row, robustness_eval, RobustnessRow};
pub use synth::{synth_scene, PrimitiveKind, PrimitiveSpec, SynthSpec};
pub use train::{
    metrics_csv, train, train_model, train_toy, write_metrics_csv, AugmentFlags, SceneSource, TrainConfig, TrainOutcome, TrainRecord, METRICS_HEADER,
};
