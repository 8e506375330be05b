//! Toy dense-prediction lab: synthetic scenes, training, metrics and
//! input-gradient saliency.

pub mod metrics;
pub mod saliency;
pub mod scene;
pub mod train;

pub use metrics::{constant_background, seg_metrics, SegMetrics};
pub use saliency::{saliency, SaliencyResult};
pub use scene::{generate_scene, DataSpec, SceneSpec, Split, SyntheticScene, NUM_CLASSES};
pub use train::{build_seg_model, evaluate, train, TrainConfig, TrainRun};
