use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::GeomError;

/// Pinhole intrinsics without distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, GeomError> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeomError::BadIntrinsics(*self))
        }
    }

    /// Intrinsics of the image obtained by 2×2 block downsampling `levels` times.
    /// Pixel centers sit at integer coordinates, so a block centered at
    /// `2u + 0.5` maps to `u`.
    pub fn downsampled(&self, levels: usize) -> Intrinsics {
        let mut k = *self;
        for _ in 0..levels {
            k = Intrinsics {
                fx: k.fx * 0.5,
                fy: k.fy * 0.5,
                cx: (k.cx - 0.5) * 0.5,
                cy: (k.cy - 0.5) * 0.5,
                width: k.width / 2,
                height: k.height / 2,
            };
        }
        k
    }

    /// Continuous pixel coordinates of a camera-frame point; `None` when `z ≤ 0`.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p.z <= 0.0 {
            return None;
        }
        Some(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Back-projects pixel `(u, v)` at depth `d` (metres along the optical axis).
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>, GeomError> {
        if !(depth > 0.0) {
            return Err(GeomError::InvalidDepth(depth));
        }
        Ok(self.unproject_unchecked(u, v, depth))
    }

    #[inline]
    pub fn unproject_unchecked(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Ray direction with unit z component, so that `t·ray` sits at depth `t`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, uv: &Vector2<f64>) -> bool {
        uv.x >= -0.5 && uv.y >= -0.5 && uv.x < self.width as f64 - 0.5 && uv.y < self.height as f64 - 0.5
    }

    /// Nearest integer pixel for continuous coordinates inside the image.
    pub fn nearest_pixel(&self, uv: &Vector2<f64>) -> Option<(usize, usize)> {
        let x = uv.x.round();
        let y = uv.y.round();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            None
        } else {
            Some((x as usize, y as usize))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}
