//! On-disk tensor and annotation formats, and the feature-grid type.

mod grid;
mod keypoints;
pub mod npy;

pub use grid::{
    load_feature_grid, resize_feature_grid, save_feature_grid, sidecar_path, FeatureGrid,
    ScalarFunction,
};
pub(crate) use grid::bilinear_sample;
pub use keypoints::{load_keypoints, parse_keypoints, KeypointPair, KeypointSet, ThresholdBasis};
pub use npy::{Dtype, Tensor};
