//! Lane-marking segmentation from fused LIDAR and camera bird's-eye views.
//!
//! The pipeline reads Velodyne point clouds, rasterizes them into a
//! 400x400 LIDAR BEV image, pairs it with a camera-derived class region
//! map, and segments the result with an encoder, ASPP, ConvLSTM and
//! decoder network trained on short temporal sequences.
//!
//! All numeric code is generic over [`Real`]; the aliases below fix the
//! scalar to `f32` for training and inference or `f64` for checking.

pub mod bev;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod network;
pub mod pointcloud;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use bev::{CbevImage, Homography, LabelMap, LbevImage, CLASS_NAMES, GRID_SIZE, NUM_CLASSES};
pub use dataset::{DatasetSplit, Sample, SequenceSample};
pub use error::{Error, Result};
pub use metrics::ConfusionMatrix;
pub use network::{FrameInput, Model, ModelConfig, ModelMode};
pub use pointcloud::{LidarPoint, PointCloudFrame};
pub use scalar::Real;
pub use tensor::{no_grad, BnMode, ParamStore, Tensor};
pub use trainer::{TrainConfig, TrainLog};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type FusionLaneModel = Model<f32>;
pub type FusionLaneModel64 = Model<f64>;
pub type FrameInput32 = FrameInput<f32>;
pub type ParamStore32 = ParamStore<f32>;
