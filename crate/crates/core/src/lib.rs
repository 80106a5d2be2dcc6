//! Object-level RGB-D SLAM on scalable TSDF volumes.

pub mod geom;
pub mod volume;
pub mod render;
pub mod odometry;
pub mod segment;
pub mod assoc;
pub mod graph;
pub mod bench;
