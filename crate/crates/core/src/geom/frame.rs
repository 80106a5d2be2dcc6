use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{GeomError, Image, Intrinsics};

/// Identifier of a persistent object landmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectId(pub u32);

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "O{}", self.0)
    }
}

/// Source of a rendered or measured surface sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum SurfaceLabel {
    #[default]
    Invalid,
    Background,
    Object(ObjectId),
}

impl SurfaceLabel {
    pub fn is_valid(&self) -> bool {
        !matches!(self, SurfaceLabel::Invalid)
    }
}

/// Accepted sensor depth interval in metres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub min: f64,
    pub max: f64,
}

impl Default for DepthRange {
    fn default() -> Self {
        DepthRange { min: 0.1, max: 5.0 }
    }
}

impl DepthRange {
    pub fn contains(&self, z: f64) -> bool {
        z >= self.min && z <= self.max
    }
}

/// Luma weights used to derive the intensity channel.
pub fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// One RGB-D observation. Color channels are in `[0, 1]`; depth is in metres
/// with `0` marking a missing measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdFrame {
    pub id: usize,
    pub timestamp: f64,
    pub color: Image<[f64; 3]>,
    pub intensity: Image<f64>,
    pub depth: Image<f64>,
}

impl RgbdFrame {
    pub fn new(id: usize, timestamp: f64, color: Image<[f64; 3]>, depth: Image<f64>) -> Result<Self, GeomError> {
        if !color.same_size(&depth) {
            return Err(GeomError::BadDimensions(format!(
                "color {}x{} vs depth {}x{}",
                color.width(),
                color.height(),
                depth.width(),
                depth.height()
            )));
        }
        if depth.data().iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(GeomError::NonFinite);
        }
        let intensity = color.map(|&c| luma(c));
        Ok(RgbdFrame {
            id,
            timestamp,
            color,
            intensity,
            depth,
        })
    }

    /// Zeroes depth samples outside `range`.
    pub fn clamp_depth(mut self, range: DepthRange) -> Self {
        for d in self.depth.data_mut() {
            if *d != 0.0 && !range.contains(*d) {
                *d = 0.0;
            }
        }
        self
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    /// Copy with every pixel outside `mask` stripped of depth.
    pub fn masked(&self, mask: &Image<bool>) -> RgbdFrame {
        let mut out = self.clone();
        for (d, &m) in out.depth.data_mut().iter_mut().zip(mask.data()) {
            if !m {
                *d = 0.0;
            }
        }
        out
    }
}

/// Per-pixel surface maps in a camera frame, either rendered from a volume or
/// derived from a depth image.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderMaps {
    pub vertex: Image<Vector3<f64>>,
    pub normal: Image<Vector3<f64>>,
    pub color: Image<f64>,
    pub label: Image<SurfaceLabel>,
}

impl RenderMaps {
    pub fn invalid(width: usize, height: usize) -> Self {
        RenderMaps {
            vertex: Image::filled(width, height, Vector3::zeros()),
            normal: Image::filled(width, height, Vector3::zeros()),
            color: Image::filled(width, height, 0.0),
            label: Image::filled(width, height, SurfaceLabel::Invalid),
        }
    }

    pub fn width(&self) -> usize {
        self.label.width()
    }

    pub fn height(&self) -> usize {
        self.label.height()
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.label[(x, y)].is_valid()
    }

    pub fn valid_count(&self) -> usize {
        self.label.data().iter().filter(|l| l.is_valid()).count()
    }

    /// Depth image (vertex z) with zeros on invalid pixels.
    pub fn depth(&self) -> Image<f64> {
        Image::from_fn(self.width(), self.height(), |x, y| {
            if self.is_valid(x, y) {
                self.vertex[(x, y)].z
            } else {
                0.0
            }
        })
    }

    /// Validity-aware 2×2 reduction. Within each block the nearest valid
    /// sample is the reference; samples farther than `disc_threshold` behind
    /// it are left out of the average, and the label follows the reference.
    pub fn downsample(&self, disc_threshold: f64) -> RenderMaps {
        let w = self.width() / 2;
        let h = self.height() / 2;
        let mut out = RenderMaps::invalid(w, h);
        for y in 0..h {
            for x in 0..w {
                let block = [(2 * x, 2 * y), (2 * x + 1, 2 * y), (2 * x, 2 * y + 1), (2 * x + 1, 2 * y + 1)];
                let reference = block
                    .iter()
                    .filter(|&&(bx, by)| self.is_valid(bx, by))
                    .min_by(|a, b| self.vertex[**a].z.total_cmp(&self.vertex[**b].z));
                let Some(&reference) = reference else { continue };
                let z_ref = self.vertex[reference].z;
                let mut v = Vector3::zeros();
                let mut n = Vector3::zeros();
                let mut c = 0.0;
                let mut count = 0.0;
                for &p in &block {
                    if self.is_valid(p.0, p.1) && self.vertex[p].z - z_ref <= disc_threshold {
                        v += self.vertex[p];
                        n += self.normal[p];
                        c += self.color[p];
                        count += 1.0;
                    }
                }
                let n = n / count;
                if n.norm() < 1e-6 {
                    continue;
                }
                out.vertex[(x, y)] = v / count;
                out.normal[(x, y)] = n.normalize();
                out.color[(x, y)] = c / count;
                out.label[(x, y)] = self.label[reference];
            }
        }
        out
    }

    /// Vertex/normal maps of an input frame, with intensity as the color
    /// channel and every valid pixel labelled background.
    pub fn from_frame(frame: &RgbdFrame, k: &Intrinsics) -> RenderMaps {
        super::vertex_and_normal_maps(frame, k)
    }
}
