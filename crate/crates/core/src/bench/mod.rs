//! Datasets, synthetic scenes, the end-to-end pipeline and its evaluation.

mod eval;
mod pipeline;
mod quality;
mod report;
mod sequence;
mod synthetic;

pub use eval::{
    align_rigid, ate_from_points, evaluate_ate, format_pose_line, match_timestamps, parse_pose_line, read_trajectory,
    write_trajectory, AteResult, StampedPose,
};

pub use pipeline::{
    run_pipeline, FrameTiming, OptimizeSummary, PipelineConfig, PipelineOutput, PipelineStats, SegmentationMode, Stage,
    TrajectoryEstimate,
};
pub use quality::{object_quality, ObjectQuality};
pub use report::{format_report, stage_summaries, write_frame_timings, write_report, StageSummary};
pub use sequence::{associate_stamps, load_tum_sequence, read_depth, tum_intrinsics, Sequence, SequenceSource, TUM_DEPTH_SCALE};
pub use synthetic::{
    generate_synthetic, CameraPath, CameraSpec, RayHit, Room, SceneObject, SceneRender, SceneSpec, SensorNoise, Shape,
    SyntheticScene, TrajectorySpec,
};

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("missing index file {0}")]
    MissingIndex(PathBuf),
    #[error("no color/depth pairs within the association window in {0}")]
    NoPairs(PathBuf),
    #[error("only {0} matched timestamps; at least 3 are needed")]
    InsufficientOverlap(usize),
    #[error("estimate is empty")]
    EmptyEstimate,
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("parse error in {path} line {line}")]
    Parse { path: PathBuf, line: usize },
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
    #[error(transparent)]
    Volume(#[from] crate::volume::VolumeError),
    #[error(transparent)]
    Render(#[from] crate::render::RenderError),
    #[error(transparent)]
    Segment(#[from] crate::segment::SegmentError),
    #[error(transparent)]
    Assoc(#[from] crate::assoc::AssocError),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
}

impl BenchError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        BenchError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
