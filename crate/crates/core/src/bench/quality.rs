//! Reconstruction quality of fused objects against a synthetic scene.

use nalgebra::Vector3;
use serde::Serialize;

use super::{BenchError, SyntheticScene};
use crate::assoc::ObjectRecord;
use crate::geom::Pose;

#[derive(Clone, Debug, Serialize)]
pub struct ObjectQuality {
    pub object: u32,
    pub label: u32,
    /// Scene instance the object was matched to, if any shares its label.
    pub instance: Option<u32>,
    pub voxel_length: f64,
    pub foreground_points: usize,
    /// RMS distance from foreground points to the nearest true surface of
    /// the scene.
    pub foreground_rms: f64,
    /// RMS distance from foreground points to the matched instance alone;
    /// surviving spill dominates this one.
    pub instance_rms: f64,
    /// Surface points farther than two voxels from the true surface.
    pub spill_points: usize,
    /// Of those, how many survive foreground extraction.
    pub spill_kept: usize,
}

impl ObjectQuality {
    /// Fraction of spill removed by foreground extraction (1 without spill).
    pub fn spill_removal(&self) -> f64 {
        if self.spill_points == 0 {
            1.0
        } else {
            1.0 - self.spill_kept as f64 / self.spill_points as f64
        }
    }
}

/// Scores every object. `alignment` maps the estimate's world frame into the
/// scene frame, e.g. [`AteResult::alignment`](super::AteResult).
pub fn object_quality(
    objects: &[ObjectRecord],
    scene: &SyntheticScene,
    alignment: &Pose,
    fg_ratio_threshold: f32,
) -> Result<Vec<ObjectQuality>, BenchError> {
    objects
        .iter()
        .map(|o| {
            let to_scene = alignment.compose(&o.pose);
            let world = |pts: Vec<crate::volume::SurfacePoint>| -> Vec<_> {
                pts.iter().map(|p| to_scene.transform_point(&p.position)).collect()
            };
            let fg = world(o.volume.extract_surface_points(true, fg_ratio_threshold)?);
            let all = world(o.volume.extract_surface_points(false, fg_ratio_threshold)?);
            let mean_dist = |i: u32| fg.iter().map(|p| scene.surface_distance(i, p)).sum::<f64>() / fg.len().max(1) as f64;
            let instance = scene
                .spec()
                .objects
                .iter()
                .enumerate()
                .filter(|(_, s)| s.label == o.label)
                .map(|(i, _)| i as u32)
                .min_by(|&a, &b| mean_dist(a).total_cmp(&mean_dist(b)));
            let dist = |p: &Vector3<f64>| instance.map_or(f64::INFINITY, |i| scene.surface_distance(i, p));
            let rms = |d: &dyn Fn(&Vector3<f64>) -> f64| {
                if fg.is_empty() {
                    f64::NAN
                } else {
                    (fg.iter().map(|p| d(p).powi(2)).sum::<f64>() / fg.len() as f64).sqrt()
                }
            };
            let far = 2.0 * o.voxel_length;
            Ok(ObjectQuality {
                object: o.id.0,
                label: o.label,
                instance,
                voxel_length: o.voxel_length,
                foreground_points: fg.len(),
                foreground_rms: rms(&|p| scene.scene_distance(p)),
                instance_rms: rms(&dist),
                spill_points: all.iter().filter(|p| dist(p) > far).count(),
                spill_kept: fg.iter().filter(|p| dist(p) > far).count(),
            })
        })
        .collect()
}
