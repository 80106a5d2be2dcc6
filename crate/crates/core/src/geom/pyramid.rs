use nalgebra::Vector3;

use super::{GeomError, Image, Intrinsics, RenderMaps, RgbdFrame, SurfaceLabel};

/// Depth jump (metres) above which neighbouring samples are not averaged or
/// differenced.
pub const DISC_THRESHOLD: f64 = 0.07;

#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub frame: RgbdFrame,
    pub intrinsics: Intrinsics,
}

/// Level 0 is the input; each further level halves both dimensions.
pub fn build_pyramid(frame: &RgbdFrame, k: &Intrinsics, levels: usize) -> Result<Vec<PyramidLevel>, GeomError> {
    if levels == 0 {
        return Err(GeomError::BadDimensions("pyramid needs at least one level".into()));
    }
    let div = 1usize << (levels - 1);
    if frame.width() % div != 0 || frame.height() % div != 0 {
        return Err(GeomError::BadDimensions(format!(
            "{}x{} not divisible by {} for {} levels",
            frame.width(),
            frame.height(),
            div,
            levels
        )));
    }
    let mut out = vec![PyramidLevel {
        frame: frame.clone(),
        intrinsics: *k,
    }];
    for level in 1..levels {
        let prev = &out[level - 1];
        let next = PyramidLevel {
            frame: downsample_frame(&prev.frame, DISC_THRESHOLD),
            intrinsics: prev.intrinsics.downsampled(1),
        };
        out.push(next);
    }
    Ok(out)
}

/// 2×2 reduction: color is box-averaged, depth averages only valid samples
/// within `disc_threshold` of the nearest one in the block.
pub fn downsample_frame(frame: &RgbdFrame, disc_threshold: f64) -> RgbdFrame {
    let w = frame.width() / 2;
    let h = frame.height() / 2;
    let color = Image::from_fn(w, h, |x, y| {
        let mut acc = [0.0; 3];
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let c = frame.color[(2 * x + dx, 2 * y + dy)];
            for i in 0..3 {
                acc[i] += 0.25 * c[i];
            }
        }
        acc
    });
    let intensity = Image::from_fn(w, h, |x, y| {
        let mut acc = 0.0;
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            acc += 0.25 * frame.intensity[(2 * x + dx, 2 * y + dy)];
        }
        acc
    });
    let depth = Image::from_fn(w, h, |x, y| {
        let samples = [
            frame.depth[(2 * x, 2 * y)],
            frame.depth[(2 * x + 1, 2 * y)],
            frame.depth[(2 * x, 2 * y + 1)],
            frame.depth[(2 * x + 1, 2 * y + 1)],
        ];
        let nearest = samples.iter().copied().filter(|&d| d > 0.0).fold(f64::INFINITY, f64::min);
        if !nearest.is_finite() {
            return 0.0;
        }
        let (sum, n) = samples
            .iter()
            .filter(|&&d| d > 0.0 && d - nearest <= disc_threshold)
            .fold((0.0, 0.0), |(s, n), &d| (s + d, n + 1.0));
        sum / n
    });
    RgbdFrame {
        id: frame.id,
        timestamp: frame.timestamp,
        color,
        intensity,
        depth,
    }
}

/// Vertex map by back-projection and normals from central differences,
/// oriented toward the camera. A pixel is invalid when it or any of its four
/// neighbours lacks depth, or when a neighbour jumps by more than the
/// discontinuity threshold.
pub fn vertex_and_normal_maps(frame: &RgbdFrame, k: &Intrinsics) -> RenderMaps {
    let w = frame.width();
    let h = frame.height();
    let vertex = Image::from_fn(w, h, |x, y| {
        let d = frame.depth[(x, y)];
        if d > 0.0 {
            k.unproject_unchecked(x as f64, y as f64, d)
        } else {
            Vector3::zeros()
        }
    });
    let mut maps = RenderMaps::invalid(w, h);
    maps.color = frame.intensity.clone();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let d = frame.depth[(x, y)];
            if d <= 0.0 {
                continue;
            }
            let neighbours = [
                frame.depth[(x - 1, y)],
                frame.depth[(x + 1, y)],
                frame.depth[(x, y - 1)],
                frame.depth[(x, y + 1)],
            ];
            if neighbours.iter().any(|&n| n <= 0.0 || (n - d).abs() > DISC_THRESHOLD) {
                continue;
            }
            let dx = vertex[(x + 1, y)] - vertex[(x - 1, y)];
            let dy = vertex[(x, y + 1)] - vertex[(x, y - 1)];
            let n = dx.cross(&dy);
            let norm = n.norm();
            if norm < 1e-12 {
                continue;
            }
            let v = vertex[(x, y)];
            let mut n = n / norm;
            if n.dot(&v) > 0.0 {
                n = -n;
            }
            maps.normal[(x, y)] = n;
            maps.label[(x, y)] = SurfaceLabel::Background;
        }
    }
    maps.vertex = vertex;
    maps
}
