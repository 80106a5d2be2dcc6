//! Object map: instantiating object volumes from detections, associating
//! detections with rendered objects, fusing them, and exporting the result.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Image, Intrinsics, Mask, ObjectId, Pose, RgbdFrame};
use crate::segment::{l1, propagate_masks, BundleSource, InstanceDetection, SegmentationBundle};
use crate::volume::{IntegrateMode, IntegrateStats, ScalableTsdfVolume, TsdfConfig, VolumeError};

#[derive(Debug, Error)]
pub enum AssocError {
    #[error("mask dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("only {found} valid depth samples under the mask, need {required}")]
    TooFewPoints { found: usize, required: usize },
    #[error("object extent {0:.4} m below minimum")]
    DegenerateExtent(f64),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("export failed: {0}")]
    Export(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AssocConfig {
    /// Detections gate an object when IoU with its virtual mask exceeds this.
    pub iou_gate: f64,
    /// Object voxel length as a fraction of the largest extent.
    pub gamma: f64,
    pub min_points: usize,
    pub min_extent: f64,
    /// L1 gate of the feature update.
    pub feature_gate: f64,
    /// Keyframes a new detection must persist before it becomes an object.
    pub confirm_keyframes: usize,
    pub max_objects: usize,
    /// Foreground-ratio threshold for export and rendering.
    pub fg_ratio_threshold: f32,
    /// Pixels whose rays count as background evidence during fusion.
    pub background_region: BackgroundRegion,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundRegion {
    /// Detection box minus its mask.
    BoundingBox,
    /// Every pixel outside the mask. Only already allocated object blocks
    /// are touched, so this reaches spill that drifted out of later boxes.
    #[default]
    Frame,
}

impl Default for AssocConfig {
    fn default() -> Self {
        AssocConfig {
            iou_gate: 0.2,
            gamma: 1.0 / (64.0 * std::f64::consts::SQRT_2),
            min_points: 200,
            min_extent: 0.03,
            feature_gate: 8.0,
            confirm_keyframes: 2,
            max_objects: 10,
            fg_ratio_threshold: 0.5,
            background_region: BackgroundRegion::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ObjectRecord {
    pub id: ObjectId,
    pub label: u32,
    pub volume: ScalableTsdfVolume,
    /// `T^W_O`.
    pub pose: Pose,
    pub feature: Vec<f64>,
    pub feature_weight: f64,
    pub voxel_length: f64,
    pub first_seen: usize,
    pub last_seen: usize,
    pub observations: usize,
}

/// An object as offered to [`associate`]: its fused feature and the mask it
/// won in the composed render.
#[derive(Clone, Copy, Debug)]
pub struct AssocCandidate<'a> {
    pub id: ObjectId,
    pub feature: &'a [f64],
    pub virtual_mask: &'a Mask,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssociationOutcome {
    /// `(detection index, object)` pairs, sorted by detection index.
    pub matches: Vec<(usize, ObjectId)>,
    pub unmatched_detections: Vec<usize>,
    /// Objects whose IoU gate each detection passed, by ascending id.
    pub candidate_sets: Vec<Vec<ObjectId>>,
}

impl AssociationOutcome {
    pub fn total_distance(&self, detections: &[InstanceDetection], objects: &[AssocCandidate<'_>]) -> f64 {
        self.matches
            .iter()
            .map(|&(d, id)| {
                let o = objects.iter().find(|o| o.id == id).unwrap();
                l1(&detections[d].feature, o.feature)
            })
            .sum()
    }
}

pub fn iou(a: &Mask, b: &Mask) -> Result<f64, AssocError> {
    if !a.same_size(b) {
        return Err(AssocError::DimensionMismatch((a.width(), a.height()), (b.width(), b.height())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Gates detection–object pairs by virtual-mask IoU, then picks the
/// assignment with the most matches and, among those, the smallest total L1
/// feature distance.
pub fn associate(
    detections: &[InstanceDetection],
    objects: &[AssocCandidate<'_>],
    iou_gate: f64,
) -> Result<AssociationOutcome, AssocError> {
    let mut gated = vec![vec![None; objects.len()]; detections.len()];
    let mut candidate_sets = vec![Vec::new(); detections.len()];
    for (d, det) in detections.iter().enumerate() {
        for (o, obj) in objects.iter().enumerate() {
            if iou(&det.mask, obj.virtual_mask)? > iou_gate {
                gated[d][o] = Some(l1(&det.feature, obj.feature));
                candidate_sets[d].push(obj.id);
            }
        }
        candidate_sets[d].sort();
    }
    let n = detections.len().max(objects.len());
    let finite_sum: f64 = gated.iter().flatten().flatten().sum();
    let forbidden = 1.0 + 2.0 * finite_sum;
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|d| {
            (0..n)
                .map(|o| gated.get(d).and_then(|row| row.get(o).copied().flatten()).unwrap_or(forbidden))
                .collect()
        })
        .collect();
    let assignment = hungarian(&cost);
    let mut matches = Vec::new();
    let mut unmatched_detections = Vec::new();
    for (d, row) in gated.iter().enumerate() {
        let o = assignment[d];
        if o < objects.len() && row[o].is_some() {
            matches.push((d, objects[o].id));
        } else {
            unmatched_detections.push(d);
        }
    }
    Ok(AssociationOutcome {
        matches,
        unmatched_detections,
        candidate_sets,
    })
}

/// Minimum-cost perfect matching on a square matrix; `result[row] = column`.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // potentials and matching are 1-based with column 0 as the virtual root
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        result[p[j] - 1] = j - 1;
    }
    result
}

/// Gated running average: the incoming feature is accepted with unit weight
/// when its L1 distance to `f_prev` is at most `lambda`, otherwise ignored.
pub fn update_feature(f_prev: &[f64], w_prev: f64, f_in: &[f64], lambda: f64) -> (Vec<f64>, f64) {
    if l1(f_prev, f_in) > lambda {
        return (f_prev.to_vec(), w_prev);
    }
    let f = f_prev
        .iter()
        .zip(f_in)
        .map(|(p, i)| (w_prev * p + i) / (w_prev + 1.0))
        .collect();
    (f, w_prev + 1.0)
}

/// Back-projects the masked depth of `frame` into world coordinates.
pub fn masked_world_points(mask: &Mask, frame: &RgbdFrame, cam_to_world: &Pose, k: &Intrinsics) -> Vec<Vector3<f64>> {
    mask.enumerate()
        .filter(|&(x, y, &m)| m && frame.depth[(x, y)] > 0.0)
        .map(|(x, y, _)| cam_to_world.transform_point(&k.unproject_unchecked(x as f64, y as f64, frame.depth[(x, y)])))
        .collect()
}

/// Creates an object volume from a detection. The voxel length scales with
/// the largest axis-aligned extent of the masked points; the object frame
/// keeps the camera's orientation and has its origin at the componentwise
/// minimum of the points.
pub fn instantiate(
    id: ObjectId,
    det: &InstanceDetection,
    frame: &RgbdFrame,
    cam_to_world: &Pose,
    k: &Intrinsics,
    frame_index: usize,
    cfg: &AssocConfig,
) -> Result<ObjectRecord, AssocError> {
    let points = masked_world_points(&det.mask, frame, cam_to_world, k);
    if points.len() < cfg.min_points {
        return Err(AssocError::TooFewPoints {
            found: points.len(),
            required: cfg.min_points,
        });
    }
    let (lo, hi) = points.iter().fold(
        (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    );
    let extent = (hi - lo).amax();
    if extent < cfg.min_extent {
        return Err(AssocError::DegenerateExtent(extent));
    }
    let voxel_length = cfg.gamma * extent;
    let pose = Pose::new(*cam_to_world.rotation(), lo);
    let mut record = ObjectRecord {
        id,
        label: det.label,
        volume: ScalableTsdfVolume::new(TsdfConfig::with_voxel_length(voxel_length)),
        pose,
        feature: det.feature.clone(),
        feature_weight: 1.0,
        voxel_length,
        first_seen: frame_index,
        last_seen: frame_index,
        observations: 0,
    };
    integrate_detection(&mut record, det, frame, cam_to_world, k, cfg.background_region)?;
    Ok(record)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FuseStats {
    pub foreground: IntegrateStats,
    pub background: IntegrateStats,
}

/// Integrates the mask in foreground mode and the rest of the bounding box
/// in background mode (existing blocks only), then updates the feature.
pub fn fuse_detection(
    obj: &mut ObjectRecord,
    det: &InstanceDetection,
    frame: &RgbdFrame,
    cam_to_world: &Pose,
    k: &Intrinsics,
    frame_index: usize,
    config: &AssocConfig,
) -> Result<FuseStats, AssocError> {
    if obj.volume.is_offloaded() {
        obj.volume.reload()?;
    }
    let stats = integrate_detection(obj, det, frame, cam_to_world, k, config.background_region)?;
    let (f, w) = update_feature(&obj.feature, obj.feature_weight, &det.feature, config.feature_gate);
    obj.feature = f;
    obj.feature_weight = w;
    obj.last_seen = frame_index;
    Ok(stats)
}

fn integrate_detection(
    obj: &mut ObjectRecord,
    det: &InstanceDetection,
    frame: &RgbdFrame,
    cam_to_world: &Pose,
    k: &Intrinsics,
    region: BackgroundRegion,
) -> Result<FuseStats, AssocError> {
    let cam_to_vol = obj.pose.inverse().compose(cam_to_world);
    let foreground = obj
        .volume
        .integrate(frame, Some(&det.mask), &cam_to_vol, k, IntegrateMode::Foreground)?;
    let bg_mask = match region {
        BackgroundRegion::BoundingBox => det.bbox_complement(),
        BackgroundRegion::Frame => det.mask.complement(),
    };
    let background = obj
        .volume
        .integrate_existing(frame, Some(&bg_mask), &cam_to_vol, k, IntegrateMode::Background)?;
    obj.observations += 1;
    Ok(FuseStats { foreground, background })
}

#[derive(Clone, Debug)]
struct Pending {
    detection: InstanceDetection,
    keyframe: usize,
    cam_to_world: Pose,
}

/// What one keyframe did to the map.
#[derive(Clone, Debug, Default)]
pub struct MapUpdate {
    pub outcome: AssociationOutcome,
    pub created: Vec<ObjectId>,
    pub deferred: usize,
    pub rejected: usize,
}

/// Owns all object records plus detections waiting for confirmation.
#[derive(Clone, Debug)]
pub struct ObjectMap {
    pub config: AssocConfig,
    objects: Vec<ObjectRecord>,
    next_id: u32,
    pending: Vec<Pending>,
    keyframes: usize,
    /// New objects refused because the map was full.
    pub dropped_new: usize,
}

impl ObjectMap {
    pub fn new(config: AssocConfig) -> Self {
        ObjectMap {
            config,
            objects: Vec::new(),
            next_id: 0,
            pending: Vec::new(),
            keyframes: 0,
            dropped_new: 0,
        }
    }

    pub fn objects(&self) -> &[ObjectRecord] {
        &self.objects
    }

    pub fn objects_mut(&mut self) -> &mut [ObjectRecord] {
        &mut self.objects
    }

    pub fn get(&self, id: ObjectId) -> Option<&ObjectRecord> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn get_mut(&mut self, id: ObjectId) -> Option<&mut ObjectRecord> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    /// Associates a keyframe's detections against the objects in
    /// `virtual_masks`, fuses matches, and instantiates detections that
    /// stayed unmatched for `confirm_keyframes` consecutive keyframes.
    pub fn process_keyframe(
        &mut self,
        bundle: &SegmentationBundle,
        virtual_masks: &[(ObjectId, Mask)],
        frame: &RgbdFrame,
        cam_to_world: &Pose,
        k: &Intrinsics,
    ) -> Result<MapUpdate, AssocError> {
        let keyframe = self.keyframes;
        self.keyframes += 1;
        let features: Vec<(ObjectId, Vec<f64>)> = virtual_masks
            .iter()
            .filter_map(|(id, _)| self.get(*id).map(|o| (*id, o.feature.clone())))
            .collect();
        let candidates: Vec<AssocCandidate<'_>> = virtual_masks
            .iter()
            .filter_map(|(id, m)| {
                features.iter().find(|(fid, _)| fid == id).map(|(_, f)| AssocCandidate {
                    id: *id,
                    feature: f,
                    virtual_mask: m,
                })
            })
            .collect();
        let outcome = associate(&bundle.detections, &candidates, self.config.iou_gate)?;
        for &(d, id) in &outcome.matches {
            let config = self.config.clone();
            let obj = self.get_mut(id).expect("matched object exists");
            fuse_detection(obj, &bundle.detections[d], frame, cam_to_world, k, bundle.frame_id, &config)?;
        }
        let mut update = MapUpdate {
            outcome,
            ..Default::default()
        };
        let unmatched: Vec<&InstanceDetection> =
            update.outcome.unmatched_detections.iter().map(|&d| &bundle.detections[d]).collect();
        let confirmed = self.confirm(&unmatched, frame, cam_to_world, k, keyframe);
        let mut next_pending = Vec::new();
        for (det, ok) in unmatched.into_iter().zip(confirmed) {
            if !ok {
                next_pending.push(Pending {
                    detection: det.clone(),
                    keyframe,
                    cam_to_world: *cam_to_world,
                });
                update.deferred += 1;
                continue;
            }
            if self.objects.len() >= self.config.max_objects {
                self.dropped_new += 1;
                continue;
            }
            let id = ObjectId(self.next_id);
            match instantiate(id, det, frame, cam_to_world, k, bundle.frame_id, &self.config) {
                Ok(record) => {
                    self.next_id += 1;
                    self.objects.push(record);
                    update.created.push(id);
                }
                Err(AssocError::TooFewPoints { .. } | AssocError::DegenerateExtent(_)) => update.rejected += 1,
                Err(e) => return Err(e),
            }
        }
        self.pending = next_pending;
        Ok(update)
    }

    /// A detection is confirmed once it overlaps a same-label detection left
    /// pending by the previous keyframe(s), warped into this view.
    fn confirm(
        &self,
        unmatched: &[&InstanceDetection],
        frame: &RgbdFrame,
        cam_to_world: &Pose,
        k: &Intrinsics,
        keyframe: usize,
    ) -> Vec<bool> {
        if self.config.confirm_keyframes <= 1 {
            return vec![true; unmatched.len()];
        }
        let window = self.config.confirm_keyframes - 1;
        let warped: Vec<(u32, Mask)> = self
            .pending
            .iter()
            .filter(|p| keyframe - p.keyframe <= window)
            .filter_map(|p| {
                let bundle = SegmentationBundle {
                    frame_id: 0,
                    detections: vec![p.detection.clone()],
                    source: BundleSource::Propagated,
                };
                let prev_to_cur = cam_to_world.inverse().compose(&p.cam_to_world);
                let out = propagate_masks(&bundle, 0, &prev_to_cur, &frame.depth, k);
                out.detections.into_iter().next().map(|d| (d.label, d.mask))
            })
            .collect();
        unmatched
            .iter()
            .map(|det| {
                warped
                    .iter()
                    .any(|(label, m)| *label == det.label && iou(&det.mask, m).unwrap_or(0.0) > self.config.iou_gate)
            })
            .collect()
    }

    /// Inserts a ready-made record, e.g. when rebuilding a map.
    pub fn insert(&mut self, record: ObjectRecord) {
        self.next_id = self.next_id.max(record.id.0 + 1);
        self.objects.push(record);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u32,
    pub label: u32,
    /// `[tx, ty, tz, qx, qy, qz, qw]` of `T^W_O`.
    pub pose: [f64; 7],
    pub voxel_length: f64,
    pub points: usize,
    pub file: String,
}

/// Writes one ASCII PLY of world-frame oriented foreground points per object
/// plus `manifest.json`.
pub fn export_objects(objects: &[ObjectRecord], dir: &Path, fg_ratio_threshold: f32) -> Result<Vec<ManifestEntry>, AssocError> {
    std::fs::create_dir_all(dir).map_err(|e| AssocError::Export(e.to_string()))?;
    let mut manifest = Vec::new();
    for obj in objects {
        let mut volume = obj.volume.clone();
        if volume.is_offloaded() {
            volume.reload()?;
        }
        let points = volume.extract_surface_points(true, fg_ratio_threshold)?;
        let file = format!("object_{:03}.ply", obj.id.0);
        write_ply(&dir.join(&file), obj, &points).map_err(|e| AssocError::Export(e.to_string()))?;
        manifest.push(ManifestEntry {
            id: obj.id.0,
            label: obj.label,
            pose: pose_to_array(&obj.pose),
            voxel_length: obj.voxel_length,
            points: points.len(),
            file,
        });
    }
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| AssocError::Export(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json).map_err(|e| AssocError::Export(e.to_string()))?;
    Ok(manifest)
}

#[derive(Serialize, Deserialize)]
struct StoredObject {
    id: u32,
    label: u32,
    pose: [f64; 7],
    feature: Vec<f64>,
    feature_weight: f64,
    voxel_length: f64,
    first_seen: usize,
    last_seen: usize,
    observations: usize,
    volume: String,
}

fn pose_to_array(p: &Pose) -> [f64; 7] {
    let (t, q) = (p.translation(), p.quaternion());
    [t.x, t.y, t.z, q.i, q.j, q.k, q.w]
}

/// Saves complete object state, volumes included, as `objects.json` plus one
/// volume record per object. [`load_objects`] restores it exactly.
pub fn save_objects(objects: &[ObjectRecord], dir: &Path) -> Result<(), AssocError> {
    std::fs::create_dir_all(dir).map_err(|e| AssocError::Export(e.to_string()))?;
    let mut stored = Vec::with_capacity(objects.len());
    for obj in objects {
        let mut volume = obj.volume.clone();
        if volume.is_offloaded() {
            volume.reload()?;
        }
        let file = format!("object_{:03}.vol", obj.id.0);
        crate::volume::write_volume(&dir.join(&file), volume.voxel_length(), volume.trunc_dist(), volume.blocks())?;
        stored.push(StoredObject {
            id: obj.id.0,
            label: obj.label,
            pose: pose_to_array(&obj.pose),
            feature: obj.feature.clone(),
            feature_weight: obj.feature_weight,
            voxel_length: obj.voxel_length,
            first_seen: obj.first_seen,
            last_seen: obj.last_seen,
            observations: obj.observations,
            volume: file,
        });
    }
    let json = serde_json::to_string_pretty(&stored).map_err(|e| AssocError::Export(e.to_string()))?;
    std::fs::write(dir.join("objects.json"), json).map_err(|e| AssocError::Export(e.to_string()))
}

pub fn load_objects(dir: &Path) -> Result<Vec<ObjectRecord>, AssocError> {
    let text = std::fs::read_to_string(dir.join("objects.json")).map_err(|e| AssocError::Export(e.to_string()))?;
    let stored: Vec<StoredObject> = serde_json::from_str(&text).map_err(|e| AssocError::Export(e.to_string()))?;
    stored
        .into_iter()
        .map(|s| {
            let record = crate::volume::read_volume(&dir.join(&s.volume))?;
            let template = ScalableTsdfVolume::new(TsdfConfig::with_voxel_length(record.voxel_length));
            let p = s.pose;
            let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(p[6], p[3], p[4], p[5]));
            Ok(ObjectRecord {
                id: ObjectId(s.id),
                label: s.label,
                volume: ScalableTsdfVolume::from_record(record, &template),
                pose: Pose::from_quaternion(q, Vector3::new(p[0], p[1], p[2])),
                feature: s.feature,
                feature_weight: s.feature_weight,
                voxel_length: s.voxel_length,
                first_seen: s.first_seen,
                last_seen: s.last_seen,
                observations: s.observations,
            })
        })
        .collect()
}

fn write_ply(path: &Path, obj: &ObjectRecord, points: &[crate::volume::SurfacePoint]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", points.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    writeln!(w, "property float nx\nproperty float ny\nproperty float nz")?;
    writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header")?;
    for p in points {
        let x = obj.pose.transform_point(&p.position);
        let n = obj.pose.transform_vector(&p.normal);
        let c = p.color.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8);
        writeln!(w, "{} {} {} {} {} {} {} {} {}", x.x, x.y, x.z, n.x, n.y, n.z, c[0], c[1], c[2])?;
    }
    w.flush()
}

/// Virtual masks of every object present in a label map.
pub fn virtual_masks_from_labels(labels: &Image<crate::geom::SurfaceLabel>, ids: &[ObjectId]) -> Vec<(ObjectId, Mask)> {
    ids.iter()
        .map(|&id| (id, labels.map(|l| *l == crate::geom::SurfaceLabel::Object(id))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(mask: Mask, feature: Vec<f64>) -> InstanceDetection {
        InstanceDetection::new(1, 0.9, mask, feature).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = Mask::from_box(20, 20, [0, 0, 9, 9]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = Mask::from_box(20, 20, [10, 10, 19, 19]);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let c = Mask::from_box(20, 20, [5, 0, 14, 9]);
        assert!((iou(&a, &c).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let empty = Image::filled(20, 20, false);
        assert_eq!(iou(&empty, &empty).unwrap(), 0.0);
        assert!(iou(&a, &Image::filled(5, 5, false)).is_err());
    }

    #[test]
    fn nothing_gated_leaves_everything_unmatched() {
        let m = Mask::from_box(20, 20, [0, 0, 4, 4]);
        let far = Mask::from_box(20, 20, [10, 10, 19, 19]);
        let f = vec![0.0; 4];
        let dets = vec![det(m.clone(), f.clone()), det(m, f.clone())];
        let objs = [AssocCandidate {
            id: ObjectId(0),
            feature: &f,
            virtual_mask: &far,
        }];
        let out = associate(&dets, &objs, 0.2).unwrap();
        assert!(out.matches.is_empty());
        assert_eq!(out.unmatched_detections, vec![0, 1]);
    }

    #[test]
    fn singleton_gate_matches_any_feature() {
        let a = Mask::from_box(20, 20, [0, 0, 9, 9]);
        let b = Mask::from_box(20, 20, [0, 0, 9, 4]);
        let f = vec![100.0; 4];
        let g = vec![-100.0; 4];
        let out = associate(
            &[det(b, f)],
            &[AssocCandidate {
                id: ObjectId(4),
                feature: &g,
                virtual_mask: &a,
            }],
            0.2,
        )
        .unwrap();
        assert_eq!(out.matches, vec![(0, ObjectId(4))]);
    }

    #[test]
    fn feature_overrides_iou_between_neighbours() {
        // two adjacent objects; detection 0 overlaps object A most but looks like B
        let va = Mask::from_box(40, 20, [0, 0, 19, 19]);
        let vb = Mask::from_box(40, 20, [14, 0, 39, 19]);
        let fa = vec![1.0, 0.0, 0.0];
        let fb = vec![0.0, 1.0, 0.0];
        let d0 = det(Mask::from_box(40, 20, [4, 0, 23, 19]), fb.clone());
        let objs = [
            AssocCandidate {
                id: ObjectId(0),
                feature: &fa,
                virtual_mask: &va,
            },
            AssocCandidate {
                id: ObjectId(1),
                feature: &fb,
                virtual_mask: &vb,
            },
        ];
        assert!(iou(&d0.mask, &va).unwrap() > iou(&d0.mask, &vb).unwrap());
        let out = associate(&[d0], &objs, 0.2).unwrap();
        assert_eq!(out.matches, vec![(0, ObjectId(1))]);
        assert_eq!(out.candidate_sets[0], vec![ObjectId(0), ObjectId(1)]);
    }

    /// Best (cardinality, −distance) over every injective partial assignment.
    fn exhaustive(gated: &[Vec<Option<f64>>]) -> (usize, f64) {
        fn go(d: usize, gated: &[Vec<Option<f64>>], used: &mut Vec<bool>, n: usize, cost: f64, best: &mut (usize, f64)) {
            if d == gated.len() {
                if n > best.0 || (n == best.0 && cost < best.1) {
                    *best = (n, cost);
                }
                return;
            }
            go(d + 1, gated, used, n, cost, best);
            for o in 0..used.len() {
                if let (false, Some(c)) = (used[o], gated[d][o]) {
                    used[o] = true;
                    go(d + 1, gated, used, n + 1, cost + c, best);
                    used[o] = false;
                }
            }
        }
        let objs = gated.first().map_or(0, |r| r.len());
        let mut best = (0, 0.0);
        go(0, gated, &mut vec![false; objs], 0, 0.0, &mut best);
        best
    }

    #[test]
    fn matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let nd = rng.random_range(0..=6);
            let no = rng.random_range(0..=6);
            let rand_mask = |rng: &mut ChaCha8Rng| {
                let x0 = rng.random_range(0..24u32);
                let y0 = rng.random_range(0..24u32);
                Mask::from_box(32, 32, [x0, y0, x0 + rng.random_range(2..8), y0 + rng.random_range(2..8)])
            };
            let rand_feat = |rng: &mut ChaCha8Rng| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let dets: Vec<_> = (0..nd).map(|_| det(rand_mask(&mut rng), rand_feat(&mut rng))).collect();
            let masks: Vec<Mask> = (0..no).map(|_| rand_mask(&mut rng)).collect();
            let feats: Vec<Vec<f64>> = (0..no).map(|_| rand_feat(&mut rng)).collect();
            let objs: Vec<AssocCandidate> = (0..no)
                .map(|i| AssocCandidate {
                    id: ObjectId(i as u32),
                    feature: &feats[i],
                    virtual_mask: &masks[i],
                })
                .collect();
            let gated: Vec<Vec<Option<f64>>> = dets
                .iter()
                .map(|d| {
                    objs.iter()
                        .map(|o| (iou(&d.mask, o.virtual_mask).unwrap() > 0.2).then(|| l1(&d.feature, o.feature)))
                        .collect()
                })
                .collect();
            let out = associate(&dets, &objs, 0.2).unwrap();
            let (n, cost) = exhaustive(&gated);
            assert_eq!(out.matches.len(), n);
            assert!((out.total_distance(&dets, &objs) - cost).abs() < 1e-9);
            assert_eq!(out.matches.len() + out.unmatched_detections.len(), nd);
        }
    }

    #[test]
    fn feature_update_rules() {
        let f = vec![1.0, 2.0, 3.0];
        let far = vec![10.0, 2.0, 3.0];
        let (g, w) = update_feature(&f, 3.0, &far, 8.0);
        assert_eq!(g, f);
        assert_eq!(w, 3.0);
        let (g, w) = update_feature(&f, 3.0, &f, 8.0);
        assert_eq!(g, f);
        assert_eq!(w, 4.0);
        let near = vec![2.0, 2.0, 4.0];
        let (g, w) = update_feature(&f, 1.0, &near, 8.0);
        assert_eq!(g, vec![1.5, 2.0, 3.5]);
        assert_eq!(w, 2.0);
        // boundary: distance equal to the gate is accepted with unit weight
        let edge = vec![1.0, 2.0, 11.0];
        assert_eq!(update_feature(&f, 1.0, &edge, 8.0).1, 2.0);
    }

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 49.5, 49.5, 100, 100).unwrap()
    }

    /// Points of an axis-aligned box face-on to an identity camera.
    fn box_frame(depth: f64, center_px: (usize, usize), half_px: usize) -> (RgbdFrame, Mask) {
        let k = k();
        let mask = Image::from_fn(k.width, k.height, |x, y| {
            x.abs_diff(center_px.0) <= half_px && y.abs_diff(center_px.1) <= half_px
        });
        let d = Image::from_fn(k.width, k.height, |x, y| if mask[(x, y)] { depth } else { depth + 1.0 });
        let frame = RgbdFrame::new(0, 0.0, Image::filled(k.width, k.height, [0.5; 3]), d).unwrap();
        (frame, mask)
    }

    #[test]
    fn voxel_length_from_extent() {
        let cfg = AssocConfig::default();
        assert!((cfg.gamma - 0.011048543456039806).abs() < 1e-15);
        // pixels 24..=74 at 2 m span exactly 1 m in x and y, nothing in depth
        let (frame, mask) = box_frame(2.0, (49, 49), 25);
        let d = det(mask, vec![0.0; 4]);
        let o = instantiate(ObjectId(0), &d, &frame, &Pose::identity(), &k(), 0, &cfg).unwrap();
        let extent = 50.0 * 2.0 / 100.0;
        assert!((o.voxel_length - cfg.gamma * extent).abs() < 1e-12);
        assert_eq!(*o.pose.rotation(), nalgebra::Matrix3::identity());
        let pts = masked_world_points(&d.mask, &frame, &Pose::identity(), &k());
        let min = pts.iter().fold(Vector3::repeat(f64::INFINITY), |a, p| a.inf(p));
        assert!((o.pose.translation() - min).norm() < 1e-12);
        assert!(o.volume.block_count() > 0);
        assert_eq!(o.feature_weight, 1.0);
    }

    #[test]
    fn instantiation_is_translation_equivariant() {
        let cfg = AssocConfig::default();
        let (frame, mask) = box_frame(1.5, (40, 60), 20);
        let d = det(mask, vec![0.0; 4]);
        let cam = Pose::from_axis_angle(Vector3::new(0.3, 1.0, 0.2), 0.4, Vector3::new(0.1, 0.2, 0.3));
        let shift = Vector3::new(1.0, -2.0, 0.5);
        let a = instantiate(ObjectId(0), &d, &frame, &cam, &k(), 0, &cfg).unwrap();
        let moved = Pose::from_translation(shift).compose(&cam);
        let b = instantiate(ObjectId(0), &d, &frame, &moved, &k(), 0, &cfg).unwrap();
        assert!((b.pose.translation() - a.pose.translation() - shift).norm() < 1e-9);
        assert!((a.voxel_length - b.voxel_length).abs() < 1e-15);
    }

    #[test]
    fn instantiation_errors() {
        let cfg = AssocConfig::default();
        let (frame, mask) = box_frame(2.0, (50, 50), 3);
        let d = det(mask, vec![]);
        assert!(matches!(
            instantiate(ObjectId(0), &d, &frame, &Pose::identity(), &k(), 0, &cfg),
            Err(AssocError::TooFewPoints { .. })
        ));
        let (frame, mask) = box_frame(0.15, (50, 50), 8);
        let d = det(mask, vec![]);
        assert!(matches!(
            instantiate(ObjectId(0), &d, &frame, &Pose::identity(), &k(), 0, &cfg),
            Err(AssocError::DegenerateExtent(_))
        ));
    }

    #[test]
    fn fusion_counts_and_repeat() {
        let cfg = AssocConfig {
            background_region: BackgroundRegion::BoundingBox,
            ..Default::default()
        };
        let (frame, mask) = box_frame(1.0, (50, 50), 15);
        // a detection mask strictly inside a larger bbox: a plus shape
        let plus = Image::from_fn(100, 100, |x, y| mask[(x, y)] && (x.abs_diff(50) <= 5 || y.abs_diff(50) <= 5));
        let d = det(plus.clone(), vec![0.0; 4]);
        let mut o = instantiate(ObjectId(0), &d, &frame, &Pose::identity(), &k(), 0, &cfg).unwrap();
        let before = o.volume.clone();
        let s = fuse_detection(&mut o, &d, &frame, &Pose::identity(), &k(), 1, &cfg).unwrap();
        assert_eq!(s.foreground.rays, plus.count());
        let bbox_area = (d.bbox[2] - d.bbox[0] + 1) as usize * (d.bbox[3] - d.bbox[1] + 1) as usize;
        assert_eq!(s.background.rays, bbox_area - plus.count());
        let mut more_weight = 0;
        for (a, b) in before.blocks().iter().zip(o.volume.blocks()) {
            for (va, vb) in a.voxels.iter().zip(&b.voxels) {
                if va.weight > 0.0 {
                    assert!((va.tsdf - vb.tsdf).abs() < 1e-6);
                    if vb.weight > va.weight {
                        more_weight += 1;
                    }
                }
            }
        }
        assert!(more_weight > 0);
        assert_eq!(o.feature_weight, 2.0);
        assert_eq!(o.last_seen, 1);
    }

    #[test]
    fn spilled_mask_is_filtered_by_background_counts() {
        let cfg = AssocConfig::default();
        let k = k();
        // a disc at 1 m in front of a wall at 1.3 m
        let disc = Image::from_fn(100, 100, |x, y| (x as f64 - 50.0).powi(2) + (y as f64 - 50.0).powi(2) <= 20.0 * 20.0);
        let depth = disc.map(|&m| if m { 1.0 } else { 1.3 });
        let frame = RgbdFrame::new(0, 0.0, Image::filled(100, 100, [0.5; 3]), depth).unwrap();
        let bbox = disc.bounding_box().unwrap();
        let spill = Mask::from_box(100, 100, bbox);
        let mut o = instantiate(ObjectId(0), &det(spill.clone(), vec![0.0]), &frame, &Pose::identity(), &k, 0, &cfg).unwrap();
        let spill_voxels = |o: &ObjectRecord| -> (usize, usize) {
            let pts = o.volume.extract_surface_points(false, 0.0).unwrap();
            let wall: Vec<_> = pts
                .iter()
                .filter(|p| o.pose.transform_point(&p.position).z > 1.2 && p.fg_count > 0)
                .collect();
            (wall.len(), wall.iter().filter(|p| p.bg_count > 0).count())
        };
        let (n0, _) = spill_voxels(&o);
        assert!(n0 > 0);
        for i in 1..4 {
            fuse_detection(&mut o, &det(disc.clone(), vec![0.0]), &frame, &Pose::identity(), &k, i, &cfg).unwrap();
        }
        let (n, with_bg) = spill_voxels(&o);
        assert!(with_bg as f64 > 0.9 * n as f64);
        let kept = o.volume.extract_surface_points(true, cfg.fg_ratio_threshold).unwrap();
        let kept_wall = kept.iter().filter(|p| o.pose.transform_point(&p.position).z > 1.2).count();
        assert!(kept_wall * 10 < n, "{kept_wall} of {n} spill points survive");
        assert!(kept.len() > 100);
    }

    #[test]
    fn spill_outside_later_boxes_needs_frame_region() {
        let k = k();
        let disc = Image::from_fn(100, 100, |x, y| (x as f64 - 50.0).powi(2) + (y as f64 - 50.0).powi(2) <= 15.0 * 15.0);
        let depth = disc.map(|&m| if m { 1.0 } else { 1.3 });
        let frame = RgbdFrame::new(0, 0.0, Image::filled(100, 100, [0.5; 3]), depth).unwrap();
        let [x0, y0, x1, y1] = disc.bounding_box().unwrap();
        // spill reaches ten pixels past the box later detections will report
        let spill = Mask::from_box(100, 100, [x0 - 10, y0 - 10, x1 + 10, y1 + 10]);
        let kept_wall = |region| {
            let cfg = AssocConfig {
                background_region: region,
                ..Default::default()
            };
            let mut o = instantiate(ObjectId(0), &det(spill.clone(), vec![0.0]), &frame, &Pose::identity(), &k, 0, &cfg).unwrap();
            for i in 1..4 {
                fuse_detection(&mut o, &det(disc.clone(), vec![0.0]), &frame, &Pose::identity(), &k, i, &cfg).unwrap();
            }
            let kept = o.volume.extract_surface_points(true, cfg.fg_ratio_threshold).unwrap();
            kept.iter().filter(|p| o.pose.transform_point(&p.position).z > 1.2).count()
        };
        assert!(kept_wall(BackgroundRegion::BoundingBox) > 100);
        assert_eq!(kept_wall(BackgroundRegion::Frame), 0);
    }

    #[test]
    fn map_defers_then_creates() {
        let k = k();
        let (frame, mask) = box_frame(1.0, (50, 50), 20);
        let bundle = SegmentationBundle {
            frame_id: 0,
            detections: vec![det(mask, vec![0.0; 4])],
            source: BundleSource::Oracle,
        };
        let mut map = ObjectMap::new(AssocConfig::default());
        let u = map.process_keyframe(&bundle, &[], &frame, &Pose::identity(), &k).unwrap();
        assert_eq!((u.created.len(), u.deferred), (0, 1));
        let u = map.process_keyframe(&bundle, &[], &frame, &Pose::identity(), &k).unwrap();
        assert_eq!(u.created, vec![ObjectId(0)]);
        assert_eq!(map.len(), 1);
        let vm = vec![(ObjectId(0), bundle.detections[0].mask.clone())];
        let u = map.process_keyframe(&bundle, &vm, &frame, &Pose::identity(), &k).unwrap();
        assert_eq!(u.outcome.matches, vec![(0, ObjectId(0))]);
        assert!(u.created.is_empty());
        assert_eq!(map.objects()[0].observations, 2);
    }

    #[test]
    fn export_writes_manifest_and_points() {
        let k = k();
        let (frame, mask) = box_frame(1.0, (50, 50), 20);
        let o = instantiate(ObjectId(3), &det(mask, vec![0.0]), &frame, &Pose::identity(), &k, 0, &AssocConfig::default())
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = export_objects(&[o], dir.path(), 0.5).unwrap();
        assert_eq!(m[0].id, 3);
        assert!(m[0].points > 0);
        let ply = std::fs::read_to_string(dir.path().join(&m[0].file)).unwrap();
        assert!(ply.starts_with("ply"));
        assert_eq!(ply.lines().count(), 13 + m[0].points);
        let parsed: Vec<ManifestEntry> =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(parsed.len(), 1);
    }

    #[test]
    fn saved_objects_load_back_exactly() {
        let k = k();
        let (frame, mask) = box_frame(1.0, (50, 50), 20);
        let cam = Pose::from_axis_angle(Vector3::new(0.2, 1.0, 0.1), 0.3, Vector3::new(0.1, -0.2, 0.4));
        let mut o = instantiate(ObjectId(5), &det(mask, vec![0.25, 0.5]), &frame, &cam, &k, 7, &AssocConfig::default())
            .unwrap();
        o.observations = 4;
        let dir = tempfile::tempdir().unwrap();
        save_objects(std::slice::from_ref(&o), dir.path()).unwrap();
        let back = load_objects(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        let b = &back[0];
        assert_eq!((b.id, b.label, b.observations, b.first_seen), (o.id, o.label, 4, 7));
        assert_eq!(b.feature, o.feature);
        assert_eq!(b.volume.payload_checksum(), o.volume.payload_checksum());
        assert!(crate::geom::ominus(&b.pose, &o.pose).norm() < 1e-12);
    }
}
