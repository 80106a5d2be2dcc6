//! RGB-D sequences: TUM directories, in-memory frames and synthetic scenes.
//! Frames are produced on demand so long recordings never sit in memory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::ImageReader;

use super::eval::StampedPose;
use super::synthetic::SyntheticScene;
use super::BenchError;
use crate::geom::{downsample_frame, Image, Intrinsics, RgbdFrame, DISC_THRESHOLD};

/// Raw TUM depth units per metre.
pub const TUM_DEPTH_SCALE: f64 = 5000.0;

#[derive(Clone, Debug, PartialEq)]
pub enum SequenceSource {
    TumDir(PathBuf),
    Synthetic { seed: u64 },
    Memory,
}

#[derive(Clone, Debug)]
enum Frames {
    Tum {
        pairs: Vec<(PathBuf, PathBuf)>,
        /// 2×2 reductions applied after loading.
        levels: usize,
    },
    Synthetic(Arc<SyntheticScene>),
    Memory(Vec<RgbdFrame>),
}

#[derive(Clone, Debug)]
pub struct Sequence {
    pub intrinsics: Intrinsics,
    pub timestamps: Vec<f64>,
    pub ground_truth: Option<Vec<StampedPose>>,
    pub source: SequenceSource,
    frames: Frames,
}

impl Sequence {
    /// Wraps frames already in memory. Timestamps are taken from the frames.
    pub fn from_frames(
        frames: Vec<RgbdFrame>,
        intrinsics: Intrinsics,
        ground_truth: Option<Vec<StampedPose>>,
    ) -> Result<Self, BenchError> {
        let timestamps: Vec<f64> = frames.iter().map(|f| f.timestamp).collect();
        check_increasing(&timestamps)?;
        Ok(Sequence {
            intrinsics,
            timestamps,
            ground_truth,
            source: SequenceSource::Memory,
            frames: Frames::Memory(frames),
        })
    }

    pub(crate) fn synthetic(scene: Arc<SyntheticScene>) -> Self {
        let timestamps = scene.timestamps();
        let ground_truth = Some(
            timestamps
                .iter()
                .zip(scene.poses())
                .map(|(&t, &p)| StampedPose::new(t, p))
                .collect(),
        );
        Sequence {
            intrinsics: scene.intrinsics(),
            timestamps,
            ground_truth,
            source: SequenceSource::Synthetic { seed: scene.noise().seed },
            frames: Frames::Synthetic(scene),
        }
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Keeps only the first `n` frames.
    pub fn truncated(mut self, n: usize) -> Self {
        self.timestamps.truncate(n);
        match &mut self.frames {
            Frames::Tum { pairs, .. } => pairs.truncate(n),
            Frames::Memory(frames) => frames.truncate(n),
            Frames::Synthetic(_) => {}
        }
        self
    }

    /// Halves the resolution `levels` times on load (TUM sequences only;
    /// other sources are returned unchanged).
    pub fn downsampled(mut self, levels: usize) -> Self {
        if let Frames::Tum { levels: l, .. } = &mut self.frames {
            *l += levels;
            self.intrinsics = self.intrinsics.downsampled(levels);
        }
        self
    }

    /// The synthetic scene behind this sequence, if any.
    pub fn scene(&self) -> Option<&SyntheticScene> {
        match &self.frames {
            Frames::Synthetic(s) => Some(s),
            _ => None,
        }
    }

    /// Ground-truth camera pose of frame `i` when the sequence carries one
    /// for exactly that timestamp.
    pub fn ground_truth_pose(&self, i: usize) -> Option<crate::geom::Pose> {
        let gt = self.ground_truth.as_ref()?;
        let t = *self.timestamps.get(i)?;
        let j = gt.partition_point(|p| p.timestamp < t);
        gt.get(j).filter(|p| p.timestamp == t).map(|p| p.pose)
    }

    pub fn frame(&self, i: usize) -> Result<RgbdFrame, BenchError> {
        match &self.frames {
            Frames::Memory(frames) => Ok(frames[i].clone()),
            Frames::Synthetic(scene) => Ok(scene.frame(i)),
            Frames::Tum { pairs, levels } => {
                let (rgb, depth) = &pairs[i];
                let mut frame = RgbdFrame::new(i, self.timestamps[i], read_color(rgb)?, read_depth(depth)?)?;
                for _ in 0..*levels {
                    frame = downsample_frame(&frame, DISC_THRESHOLD);
                }
                Ok(frame)
            }
        }
    }
}

fn check_increasing(t: &[f64]) -> Result<(), BenchError> {
    if t.windows(2).any(|w| w[1] <= w[0]) {
        return Err(BenchError::InvalidSpec("timestamps must be strictly increasing".into()));
    }
    Ok(())
}

/// Camera intrinsics of the TUM recordings, picked by the `freiburgN` (or
/// `frN`) tag in the directory name; the ROS default otherwise.
pub fn tum_intrinsics(dir: &Path) -> Intrinsics {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().to_lowercase())
        .unwrap_or_default();
    let (fx, fy, cx, cy) = if name.contains("freiburg1") || name.contains("fr1") {
        (517.3, 516.5, 318.6, 255.3)
    } else if name.contains("freiburg2") || name.contains("fr2") {
        (520.9, 521.0, 325.1, 249.7)
    } else if name.contains("freiburg3") || name.contains("fr3") {
        (535.4, 539.2, 320.1, 247.6)
    } else {
        (525.0, 525.0, 319.5, 239.5)
    };
    Intrinsics {
        fx,
        fy,
        cx,
        cy,
        width: 640,
        height: 480,
    }
}

/// `(timestamp, rest-of-line)` entries of a TUM index file.
fn read_index(path: &Path) -> Result<Vec<(f64, String)>, BenchError> {
    if !path.is_file() {
        return Err(BenchError::MissingIndex(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (stamp, rest) = line.split_once(char::is_whitespace).ok_or_else(|| BenchError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
        })?;
        let t: f64 = stamp.parse().map_err(|_| BenchError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
        })?;
        out.push((t, rest.trim().to_string()));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

/// One-to-one pairing of two sorted stamp lists: candidate pairs within
/// `max_dt` are accepted greedily by increasing time difference. Returns
/// index pairs sorted by the first list.
pub fn associate_stamps(a: &[f64], b: &[f64], max_dt: f64) -> Vec<(usize, usize)> {
    // tolerate decimal round-off in stamps written with fixed precision
    let limit = max_dt + 1e-6;
    let mut candidates = Vec::new();
    for (i, &t) in a.iter().enumerate() {
        let lo = b.partition_point(|&s| s < t - limit);
        for (j, &s) in b.iter().enumerate().skip(lo) {
            if s > t + limit {
                break;
            }
            candidates.push(((s - t).abs(), i, j));
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut out = Vec::new();
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

/// Indexes a TUM RGB-D directory. Images are read lazily by
/// [`Sequence::frame`].
pub fn load_tum_sequence(dir: &Path, max_assoc_dt: f64) -> Result<Sequence, BenchError> {
    let rgb = read_index(&dir.join("rgb.txt"))?;
    let depth = read_index(&dir.join("depth.txt"))?;
    let rgb_t: Vec<f64> = rgb.iter().map(|e| e.0).collect();
    let depth_t: Vec<f64> = depth.iter().map(|e| e.0).collect();
    let pairs = associate_stamps(&rgb_t, &depth_t, max_assoc_dt);
    if pairs.is_empty() {
        return Err(BenchError::NoPairs(dir.to_path_buf()));
    }
    let mut timestamps = Vec::with_capacity(pairs.len());
    let mut files = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        if timestamps.last().is_some_and(|&t| rgb_t[i] <= t) {
            continue;
        }
        timestamps.push(rgb_t[i]);
        files.push((dir.join(&rgb[i].1), dir.join(&depth[j].1)));
    }
    let gt_path = dir.join("groundtruth.txt");
    let ground_truth = if gt_path.is_file() {
        let mut gt = super::eval::read_trajectory(&gt_path)?;
        gt.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        Some(gt)
    } else {
        None
    };
    Ok(Sequence {
        intrinsics: tum_intrinsics(dir),
        timestamps,
        ground_truth,
        source: SequenceSource::TumDir(dir.to_path_buf()),
        frames: Frames::Tum { pairs: files, levels: 0 },
    })
}

fn open(path: &Path) -> Result<image::DynamicImage, BenchError> {
    let err = |reason: String| BenchError::Image {
        path: path.to_path_buf(),
        reason,
    };
    ImageReader::open(path)
        .map_err(|e| BenchError::io(path, e))?
        .decode()
        .map_err(|e| err(e.to_string()))
}

fn read_color(path: &Path) -> Result<Image<[f64; 3]>, BenchError> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Image::from_fn(w as usize, h as usize, |x, y| {
        let p = img.get_pixel(x as u32, y as u32).0;
        [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]
    }))
}

/// 16-bit depth PNG in metres (`raw / 5000`; zero stays missing).
pub fn read_depth(path: &Path) -> Result<Image<f64>, BenchError> {
    let img = match open(path)? {
        image::DynamicImage::ImageLuma16(img) => img,
        other => {
            return Err(BenchError::Image {
                path: path.to_path_buf(),
                reason: format!("expected 16-bit single-channel depth, got {:?}", other.color()),
            })
        }
    };
    let (w, h) = img.dimensions();
    Ok(Image::from_fn(w as usize, h as usize, |x, y| {
        img.get_pixel(x as u32, y as u32).0[0] as f64 / TUM_DEPTH_SCALE
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fmt::Write as _;

    /// Writes a tiny TUM-layout directory: 4 frames of a fronto-parallel
    /// plane at `plane_z` metres, depth stamps shifted by `depth_offset`.
    fn fixture(dir: &Path, depth_offset: f64, plane_z: f64) {
        std::fs::create_dir_all(dir.join("rgb")).unwrap();
        std::fs::create_dir_all(dir.join("depth")).unwrap();
        let mut rgb_idx = String::from("# color images\n# file: 'x.bag'\n# timestamp filename\n");
        let mut depth_idx = String::from("# depth maps\n# file: 'x.bag'\n# timestamp filename\n");
        let mut gt = String::from("# ground truth trajectory\n");
        for i in 0..4 {
            let t = 1305031102.0 + i as f64 * 0.1;
            let td = t + depth_offset;
            let rgb = image::RgbImage::from_fn(8, 6, |x, y| image::Rgb([(x * 30) as u8, (y * 40) as u8, 200]));
            rgb.save(dir.join(format!("rgb/{t:.6}.png"))).unwrap();
            let raw = (plane_z * TUM_DEPTH_SCALE).round() as u16;
            let depth = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_pixel(8, 6, image::Luma([raw]));
            depth.save(dir.join(format!("depth/{td:.6}.png"))).unwrap();
            writeln!(rgb_idx, "{t:.6} rgb/{t:.6}.png").unwrap();
            writeln!(depth_idx, "{td:.6} depth/{td:.6}.png").unwrap();
            writeln!(gt, "{t:.4} {} 0 0 0 0 0 1", 0.01 * i as f64).unwrap();
        }
        std::fs::write(dir.join("rgb.txt"), rgb_idx).unwrap();
        std::fs::write(dir.join("depth.txt"), depth_idx).unwrap();
        std::fs::write(dir.join("groundtruth.txt"), gt).unwrap();
    }

    #[test]
    fn identical_stamps_pair_one_to_one() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("rgbd_dataset_freiburg1_xyz");
        fixture(&dir, 0.0, 1.0);
        let seq = load_tum_sequence(&dir, 0.02).unwrap();
        assert_eq!(seq.len(), 4);
        assert_eq!(seq.intrinsics.fx, 517.3);
        assert_eq!(seq.ground_truth.as_ref().unwrap().len(), 4);
        let f = seq.frame(2).unwrap();
        assert_eq!((f.width(), f.height()), (8, 6));
        assert_eq!(f.color[(1, 1)], [30.0 / 255.0, 40.0 / 255.0, 200.0 / 255.0]);
    }

    #[test]
    fn depth_offsets_respect_the_window() {
        let tmp = tempfile::tempdir().unwrap();
        let near = tmp.path().join("near");
        fixture(&near, 0.02, 1.0);
        assert_eq!(load_tum_sequence(&near, 0.02).unwrap().len(), 4);
        let far = tmp.path().join("far");
        fixture(&far, 0.05, 1.0);
        assert!(matches!(load_tum_sequence(&far, 0.02), Err(BenchError::NoPairs(_))));
    }

    #[test]
    fn raw_5000_is_one_metre() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("plane");
        fixture(&dir, 0.0, 1.0);
        let seq = load_tum_sequence(&dir, 0.02).unwrap();
        let f = seq.frame(0).unwrap();
        assert!(f.depth.data().iter().all(|&d| d == 1.0));
        // the loaded plane back-projects to z = 1 everywhere
        let k = Intrinsics {
            fx: 10.0,
            fy: 10.0,
            cx: 3.5,
            cy: 2.5,
            width: 8,
            height: 6,
        };
        let maps = crate::geom::RenderMaps::from_frame(&f, &k);
        for (x, y, v) in maps.vertex.enumerate() {
            if maps.is_valid(x, y) {
                assert!((v.z - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn downsampling_halves_frames_and_intrinsics() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("rgbd_dataset_freiburg3_office");
        fixture(&dir, 0.0, 0.8);
        let seq = load_tum_sequence(&dir, 0.02).unwrap().downsampled(1);
        assert_eq!(seq.intrinsics.fx, 535.4 / 2.0);
        let f = seq.frame(0).unwrap();
        assert_eq!((f.width(), f.height()), (4, 3));
        assert!((f.depth[(0, 0)] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn missing_index_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(load_tum_sequence(tmp.path(), 0.02), Err(BenchError::MissingIndex(_))));
    }

    #[test]
    fn association_is_greedy_by_smallest_gap() {
        let a = [0.0, 0.1, 0.2, 0.3];
        let b = [0.01, 0.09, 0.115, 0.29, 0.5];
        let pairs = associate_stamps(&a, &b, 0.02);
        assert_eq!(pairs, vec![(0, 0), (1, 1), (3, 3)]);
        // 0.1 prefers 0.09 (gap 0.01) over 0.115 (gap 0.015)
        assert!(!pairs.contains(&(1, 2)));
    }
}
