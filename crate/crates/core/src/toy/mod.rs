//! Desk-scale moving-blob generator used to exercise hybrid flow matching
//! end to end.

pub mod control;
pub mod net;
pub mod sample;
pub mod scene;
pub mod train;

pub use control::{run_control, ControlConfig, ControlReport};
pub use net::{NetConfig, VelocityField, VelocityNet};
pub use sample::{sample, sample_from};
pub use scene::{centroid, make_scene, track_centroids, SceneParams, SyntheticScene};
pub use train::{make_dataset, train_toy, SceneItem, TrainConfig, TrainOutput};
