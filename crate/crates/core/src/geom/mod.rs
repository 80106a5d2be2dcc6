//! Shared geometry: SE(3) algebra, the pinhole camera, image containers,
//! RGB-D frames and the per-frame vertex/normal maps derived from them.

mod camera;
mod frame;
mod image;
mod pyramid;
mod se3;

pub use camera::Intrinsics;
pub use frame::{luma, DepthRange, ObjectId, RenderMaps, RgbdFrame, SurfaceLabel};
pub use image::{Image, Mask};
pub use pyramid::{build_pyramid, downsample_frame, vertex_and_normal_maps, PyramidLevel, DISC_THRESHOLD};
pub use se3::{ominus, se3_exp, se3_log, skew, Pose, Twist};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("invalid depth {0}")]
    InvalidDepth(f64),
    #[error("bad image dimensions: {0}")]
    BadDimensions(String),
    #[error("invalid intrinsics {0:?}")]
    BadIntrinsics(Intrinsics),
    #[error("non-finite or negative sample in frame")]
    NonFinite,
}
