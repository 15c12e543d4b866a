//! Geometry primitives shared by every pipeline stage: camera model,
//! spatial index, clustering, filtering and the similarity metrics used for
//! merging and evaluation.

mod camera;
mod cluster;
mod filter;
mod kdtree;
mod similarity;
mod types;

use thiserror::Error;

pub use camera::{
    back_project, project_points, unproject_pixel, DepthMap, Frame, PixelMask, Projection,
    Visibility,
};
pub use cluster::{dbscan, keep_largest_cluster, largest_cluster, DbscanParams, NOISE};
pub use filter::{
    denoise_fe, merge_dedup, radius_outlier_filter, statistical_outlier_filter, voxel_downsample,
    voxel_subsample, DenoiseParams,
};
pub use kdtree::KdTree;
pub use similarity::{
    bbox_containment, cosine_similarity, geometric_similarity, geometric_similarity_with_trees,
    nn_overlap, nn_overlap_with_tree, point_iou,
};
pub use types::{Aabb3, BBox2D, Intrinsics, Point3, PointCloud, Pose};

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid intrinsics: {0:?}")]
    InvalidIntrinsics(Intrinsics),
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
}
