//! Instance detections: a noisy ground-truth oracle for synthetic scenes, a
//! plain-text detection file format, and mask propagation for frames that
//! have no fresh segmentation.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Image, Intrinsics, Mask, Pose};

pub const NUM_CLASSES: usize = 80;
pub const FEATURE_DIM: usize = 64;
pub const MIN_CONFIDENCE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("no detection file at {0}")]
    MissingFile(PathBuf),
    #[error("malformed detection record in {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("detection i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceDetection {
    pub label: u32,
    pub confidence: f64,
    pub mask: Mask,
    /// `[x0, y0, x1, y1]`, inclusive.
    pub bbox: [u32; 4],
    pub class_probs: Vec<f64>,
    pub feature: Vec<f64>,
    /// Ground-truth instance behind an oracle detection; `None` otherwise.
    pub gt_instance: Option<u32>,
}

impl InstanceDetection {
    /// Builds a detection whose class distribution puts `confidence` on
    /// `label` and spreads the rest evenly. `None` for an empty mask.
    pub fn new(label: u32, confidence: f64, mask: Mask, feature: Vec<f64>) -> Option<Self> {
        let bbox = mask.bounding_box()?;
        Some(InstanceDetection {
            label,
            confidence,
            mask,
            bbox,
            class_probs: peaked_probs(label, confidence),
            feature,
            gt_instance: None,
        })
    }

    pub fn area(&self) -> usize {
        self.mask.count()
    }

    /// Pixels inside the bounding box but outside the mask.
    pub fn bbox_complement(&self) -> Mask {
        let bbox = Mask::from_box(self.mask.width(), self.mask.height(), self.bbox);
        bbox.intersection(&self.mask.complement())
    }
}

pub fn peaked_probs(label: u32, confidence: f64) -> Vec<f64> {
    let rest = (1.0 - confidence) / (NUM_CLASSES - 1) as f64;
    (0..NUM_CLASSES as u32).map(|l| if l == label { confidence } else { rest }).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleSource {
    Oracle,
    File,
    Propagated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationBundle {
    pub frame_id: usize,
    pub detections: Vec<InstanceDetection>,
    pub source: BundleSource,
}

/// Ground truth a synthetic scene exposes to the oracle.
pub trait SceneOracle {
    /// Visible instance per pixel, `None` where the background is hit.
    fn instance_map(&self, cam_to_world: &Pose, k: &Intrinsics) -> Image<Option<u32>>;
    fn class_of(&self, instance: u32) -> u32;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Masks are eroded or dilated by a random radius in `[-boundary_px, boundary_px]`.
    pub boundary_px: u32,
    pub miss_rate: f64,
    pub feature_sigma: f64,
    pub label_flip_rate: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            boundary_px: 2,
            miss_rate: 0.05,
            feature_sigma: 0.02,
            label_flip_rate: 0.02,
            seed: 7,
        }
    }
}

impl NoiseConfig {
    pub fn noiseless(seed: u64) -> Self {
        NoiseConfig {
            boundary_px: 0,
            miss_rate: 0.0,
            feature_sigma: 0.0,
            label_flip_rate: 0.0,
            seed,
        }
    }

    /// Feature gate: 1.2 × the median L1 distance between two noisy draws of
    /// the same base feature, estimated by seeded Monte Carlo.
    pub fn feature_gate(&self) -> f64 {
        if self.feature_sigma <= 0.0 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let normal = Normal::new(0.0, self.feature_sigma).unwrap();
        let mut d: Vec<f64> = (0..2001)
            .map(|_| (0..FEATURE_DIM).map(|_| (normal.sample(&mut rng) - normal.sample(&mut rng)).abs()).sum())
            .collect();
        d.sort_by(f64::total_cmp);
        1.2 * d[d.len() / 2]
    }
}

/// Unit base features per instance, with pairwise L1 distance of at least
/// `min_separation` where rejection sampling can achieve it.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    seed: u64,
    min_separation: f64,
    bases: Vec<Vec<f64>>,
}

impl FeatureBank {
    pub fn new(seed: u64, min_separation: f64) -> Self {
        FeatureBank {
            seed,
            min_separation,
            bases: Vec::new(),
        }
    }

    pub fn base(&mut self, instance: u32) -> &[f64] {
        while self.bases.len() <= instance as usize {
            let i = self.bases.len() as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i + 1)));
            let mut best: Option<(f64, Vec<f64>)> = None;
            for _ in 0..10_000 {
                let v = random_unit(&mut rng);
                let sep = self
                    .bases
                    .iter()
                    .map(|b| l1(b, &v))
                    .fold(f64::INFINITY, f64::min);
                if sep >= self.min_separation {
                    best = Some((sep, v));
                    break;
                }
                if best.as_ref().is_none_or(|(s, _)| sep > *s) {
                    best = Some((sep, v));
                }
            }
            let (sep, v) = best.unwrap();
            if sep < self.min_separation {
                log::warn!("feature base {i} separated by only {sep:.3} (< {:.3})", self.min_separation);
            }
            self.bases.push(v);
        }
        &self.bases[instance as usize]
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let v: Vec<f64> = (0..FEATURE_DIM).map(|_| normal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Noisy detections of every instance visible from `cam_to_world`.
pub struct Oracle<'a, S: SceneOracle> {
    pub scene: &'a S,
    pub noise: NoiseConfig,
    pub features: FeatureBank,
}

impl<'a, S: SceneOracle> Oracle<'a, S> {
    pub fn new(scene: &'a S, noise: NoiseConfig) -> Self {
        let separation = 4.0 * noise.feature_gate();
        let features = FeatureBank::new(noise.seed, separation);
        Oracle { scene, noise, features }
    }

    pub fn segment(&mut self, frame_id: usize, cam_to_world: &Pose, k: &Intrinsics) -> SegmentationBundle {
        let instances = self.scene.instance_map(cam_to_world, k);
        let mut ids: Vec<u32> = instances.data().iter().flatten().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise.seed.wrapping_mul(1_000_003).wrapping_add(frame_id as u64));
        let normal = (self.noise.feature_sigma > 0.0).then(|| Normal::new(0.0, self.noise.feature_sigma).unwrap());
        let mut claimed = Image::filled(k.width, k.height, false);
        let mut detections = Vec::new();
        for id in ids {
            // draw every random quantity up front so the stream does not
            // depend on which branches are taken
            let missed = rng.random::<f64>() < self.noise.miss_rate;
            let b = self.noise.boundary_px as i64;
            let radius = if b > 0 { rng.random_range(-b..=b) } else { 0 };
            let flipped = rng.random::<f64>() < self.noise.label_flip_rate;
            let other = rng.random_range(0..NUM_CLASSES as u32 - 1);
            let confidence = rng.random_range(0.7..0.99);
            let noise: Vec<f64> = (0..FEATURE_DIM)
                .map(|_| normal.map_or(0.0, |n| n.sample(&mut rng)))
                .collect();
            if missed {
                continue;
            }
            let exact = instances.map(|p| *p == Some(id));
            let mut mask = morph(&exact, radius);
            for (m, c) in mask.data_mut().iter_mut().zip(claimed.data_mut()) {
                if *c {
                    *m = false;
                } else if *m {
                    *c = true;
                }
            }
            let true_label = self.scene.class_of(id);
            let label = if flipped {
                if other >= true_label {
                    other + 1
                } else {
                    other
                }
            } else {
                true_label
            };
            let feature: Vec<f64> = self.features.base(id).iter().zip(&noise).map(|(b, n)| b + n).collect();
            if let Some(mut det) = InstanceDetection::new(label, confidence, mask, feature) {
                det.gt_instance = Some(id);
                detections.push(det);
            }
        }
        SegmentationBundle {
            frame_id,
            detections,
            source: BundleSource::Oracle,
        }
    }
}

/// Square-element dilation (`radius > 0`) or erosion (`radius < 0`).
pub fn morph(mask: &Mask, radius: i64) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let dilate = radius > 0;
    let r = radius.unsigned_abs() as i64;
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    // pixels beyond the border count as background for both operations
    let pass = |src: &Mask, horizontal: bool| {
        Image::from_fn(w as usize, h as usize, |x, y| {
            let mut acc = !dilate;
            for d in -r..=r {
                let (sx, sy) = if horizontal { (x as i64 + d, y as i64) } else { (x as i64, y as i64 + d) };
                let v = src.checked(sx, sy).copied().unwrap_or(false);
                if dilate {
                    acc |= v;
                } else {
                    acc &= v;
                }
            }
            acc
        })
    };
    pass(&pass(mask, true), false)
}

/// Fills every non-mask pixel that cannot reach the image border through
/// non-mask pixels (4-connectivity).
pub fn fill_holes(mask: &Mask) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let mut outside = Image::filled(w, h, false);
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if (x == 0 || y == 0 || x + 1 == w || y + 1 == h) && !mask[(x, y)] {
                outside[(x, y)] = true;
                queue.push_back((x, y));
            }
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            if !mask[(nx, ny)] && !outside[(nx, ny)] {
                outside[(nx, ny)] = true;
                queue.push_back((nx, ny));
            }
        }
    }
    outside.complement()
}

/// Carries the previous bundle's masks into the current frame. Each current
/// pixel with depth is warped back into the previous view with `prev_to_cur`
/// (`T^{C_t}_{C_s}`) and takes the mask value it lands on; holes left by
/// missing depth are then flood-filled.
pub fn propagate_masks(
    prev: &SegmentationBundle,
    frame_id: usize,
    prev_to_cur: &Pose,
    depth: &Image<f64>,
    k: &Intrinsics,
) -> SegmentationBundle {
    let cur_to_prev = prev_to_cur.inverse();
    let lookup = Image::from_fn(depth.width(), depth.height(), |x, y| {
        let d = depth[(x, y)];
        if d <= 0.0 {
            return None;
        }
        let p = cur_to_prev.transform_point(&k.unproject_unchecked(x as f64, y as f64, d));
        k.project(&p).and_then(|uv| k.nearest_pixel(&uv))
    });
    let detections = prev
        .detections
        .iter()
        .filter_map(|det| {
            let warped = lookup.map(|src| src.is_some_and(|(sx, sy)| det.mask[(sx, sy)]));
            let filled = fill_holes(&warped);
            let bbox = filled.bounding_box()?;
            Some(InstanceDetection {
                mask: filled,
                bbox,
                ..det.clone()
            })
        })
        .collect();
    SegmentationBundle {
        frame_id,
        detections,
        source: BundleSource::Propagated,
    }
}

pub fn detection_path(dir: &Path, frame_id: usize) -> PathBuf {
    dir.join(format!("{frame_id:06}.txt"))
}

/// Writes one detection file:
///
/// ```text
/// frame_id count
/// label confidence x0 y0 x1 y1 F f_1 … f_F npairs v_1 c_1 … v_n c_n
/// ```
///
/// with one line per detection and the mask run-length encoded row-major as
/// `(value, count)` pairs.
pub fn write_segmentation(bundle: &SegmentationBundle, dir: &Path) -> Result<PathBuf, SegmentError> {
    let mut s = format!("{} {}\n", bundle.frame_id, bundle.detections.len());
    for d in &bundle.detections {
        write!(s, "{} {} {} {} {} {} {}", d.label, d.confidence, d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3], d.feature.len())
            .unwrap();
        for f in &d.feature {
            write!(s, " {f}").unwrap();
        }
        let runs = rle(d.mask.data());
        write!(s, " {}", runs.len()).unwrap();
        for (v, c) in runs {
            write!(s, " {} {}", v as u8, c).unwrap();
        }
        s.push('\n');
    }
    let path = detection_path(dir, bundle.frame_id);
    std::fs::write(&path, s)?;
    Ok(path)
}

fn rle(data: &[bool]) -> Vec<(bool, usize)> {
    let mut runs: Vec<(bool, usize)> = Vec::new();
    for &v in data {
        match runs.last_mut() {
            Some((last, n)) if *last == v => *n += 1,
            _ => runs.push((v, 1)),
        }
    }
    runs
}

/// Reads `{dir}/{frame_id:06}.txt`, dropping detections below the
/// confidence floor. Masks must decode to exactly `width × height` pixels.
pub fn load_segmentation(
    frame_id: usize,
    dir: &Path,
    width: usize,
    height: usize,
) -> Result<SegmentationBundle, SegmentError> {
    let path = detection_path(dir, frame_id);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(SegmentError::MissingFile(path)),
        Err(e) => return Err(e.into()),
    };
    let bad = |reason: String| SegmentError::Malformed {
        path: path.clone(),
        reason,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty file".into()))?.split_whitespace().collect();
    let [id, count] = header[..] else {
        return Err(bad("header must be `frame_id count`".into()));
    };
    let id: usize = id.parse().map_err(|_| bad(format!("bad frame id {id:?}")))?;
    let count: usize = count.parse().map_err(|_| bad(format!("bad count {count:?}")))?;
    if id != frame_id {
        return Err(bad(format!("file is for frame {id}")));
    }
    let mut detections = Vec::with_capacity(count);
    for i in 0..count {
        let line = lines.next().ok_or_else(|| bad(format!("missing detection {i}")))?;
        let det = parse_detection(line, width, height).map_err(|r| bad(format!("detection {i}: {r}")))?;
        if det.confidence >= MIN_CONFIDENCE {
            detections.push(det);
        }
    }
    if lines.next().is_some() {
        return Err(bad("more lines than declared detections".into()));
    }
    Ok(SegmentationBundle {
        frame_id,
        detections,
        source: BundleSource::File,
    })
}

fn parse_detection(line: &str, width: usize, height: usize) -> Result<InstanceDetection, String> {
    let mut tok = line.split_whitespace();
    let mut next = |what: &str| tok.next().ok_or_else(|| format!("missing {what}"));
    fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, String> {
        s.parse().map_err(|_| format!("bad {what} {s:?}"))
    }
    let label: u32 = num(next("label")?, "label")?;
    if label as usize >= NUM_CLASSES {
        return Err(format!("label {label} out of range"));
    }
    let confidence: f64 = num(next("confidence")?, "confidence")?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(format!("confidence {confidence} out of range"));
    }
    let mut bbox = [0u32; 4];
    for b in &mut bbox {
        *b = num(next("bbox")?, "bbox")?;
    }
    let dim: usize = num(next("feature length")?, "feature length")?;
    let mut feature = Vec::with_capacity(dim);
    for _ in 0..dim {
        let f: f64 = num(next("feature")?, "feature")?;
        if !f.is_finite() {
            return Err("non-finite feature".into());
        }
        feature.push(f);
    }
    let pairs: usize = num(next("run count")?, "run count")?;
    let mut data = Vec::with_capacity(width * height);
    for _ in 0..pairs {
        let v: u8 = num(next("run value")?, "run value")?;
        let c: usize = num(next("run length")?, "run length")?;
        if v > 1 {
            return Err(format!("run value {v}"));
        }
        if data.len() + c > width * height {
            return Err(format!("mask exceeds {width}x{height}"));
        }
        data.extend(std::iter::repeat_n(v == 1, c));
    }
    if tok.next().is_some() {
        return Err("trailing tokens".into());
    }
    if data.len() != width * height {
        return Err(format!("mask has {} pixels, expected {}", data.len(), width * height));
    }
    let mask = Image::from_vec(width, height, data);
    match mask.bounding_box() {
        Some(tight) if tight[0] >= bbox[0] && tight[1] >= bbox[1] && tight[2] <= bbox[2] && tight[3] <= bbox[3] => {}
        Some(_) => return Err("mask extends beyond bbox".into()),
        None => return Err("empty mask".into()),
    }
    Ok(InstanceDetection {
        label,
        confidence,
        mask,
        bbox,
        class_probs: peaked_probs(label, confidence),
        feature,
        gt_instance: None,
    })
}
