//! Segment-based LiDAR mapping: incremental segmentation, learned segment
//! descriptors, map compression, global localization and multi-robot pose
//! graph optimization.

pub mod descriptor;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod kdtree;
pub mod linalg;
pub mod localization;
pub mod nn;
pub mod pipeline;
pub mod pose_graph;
pub mod preprocess;
pub mod reconstruction;
pub mod scalar;
pub mod segmentation;
pub mod semantics;
pub mod voxel_map;

pub use error::{Error, Result};
pub use scalar::Real;

/// Scalar-specialized names for the common `f64` instantiation.
pub type Point = geometry::Point3<f64>;
pub type Cloud = geometry::PointCloud<f64>;
pub type Pose = geometry::SE3Transform<f64>;
pub type VoxelGrid = voxel_map::DynamicVoxelGrid<f64>;
pub type Graph = pose_graph::PoseGraph<f64>;
pub type SegmentTracker = segmentation::Segmenter<f64>;
