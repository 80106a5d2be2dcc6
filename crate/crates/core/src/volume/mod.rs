//! Scalable TSDF volume: a spatial hash of 16³ voxel blocks allocated around
//! observed surfaces, with weighted-average fusion, foreground/background
//! counts, raycasting and surface extraction.

mod raycast;
mod store;
mod tsdf;

pub use raycast::RaycastOptions;
pub use store::{read_volume, write_volume, VolumeRecord};
pub use tsdf::{
    BlockCoord, IntegrateMode, IntegrateStats, ScalableTsdfVolume, SurfacePoint, TsdfConfig, Voxel, VoxelBlock,
    BLOCK_SIDE, BLOCK_VOXELS,
};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("volume is offloaded to {0}")]
    Offloaded(PathBuf),
    #[error("volume is not offloaded")]
    NotOffloaded,
    #[error("volume has no allocated blocks")]
    EmptyVolume,
    #[error("mask is {mask_w}x{mask_h} but frame is {frame_w}x{frame_h}")]
    MaskMismatch {
        mask_w: usize,
        mask_h: usize,
        frame_w: usize,
        frame_h: usize,
    },
    #[error("volume store i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt volume record: {0}")]
    Corrupt(String),
}
