use nalgebra::Vector3;
use rayon::prelude::*;

use super::tsdf::{BlockCache, ScalableTsdfVolume};
use super::VolumeError;
use crate::geom::{luma, Intrinsics, Pose, RenderMaps, SurfaceLabel};

#[derive(Clone, Copy, Debug)]
pub struct RaycastOptions {
    /// Label written on every hit pixel.
    pub label: SurfaceLabel,
    /// Ignore zero crossings whose nearest voxel has a foreground ratio at
    /// or below this value.
    pub min_fg_ratio: Option<f32>,
}

impl Default for RaycastOptions {
    fn default() -> Self {
        RaycastOptions {
            label: SurfaceLabel::Background,
            min_fg_ratio: None,
        }
    }
}

struct Hit {
    vertex: Vector3<f64>,
    normal: Vector3<f64>,
    color: f64,
}

impl ScalableTsdfVolume {
    /// Renders vertex, normal and intensity maps in the camera frame by
    /// marching each pixel ray through allocated blocks and stopping at the
    /// first `+ → −` TSDF crossing.
    pub fn raycast(&self, vol_to_cam: &Pose, k: &Intrinsics) -> Result<RenderMaps, VolumeError> {
        self.raycast_with(vol_to_cam, k, &RaycastOptions::default())
    }

    pub fn raycast_with(
        &self,
        vol_to_cam: &Pose,
        k: &Intrinsics,
        options: &RaycastOptions,
    ) -> Result<RenderMaps, VolumeError> {
        self.ensure_active()?;
        let (w, h) = (k.width, k.height);
        let Some(bounds) = self.bounds() else {
            return Ok(RenderMaps::invalid(w, h));
        };
        let cam_to_vol = vol_to_cam.inverse();
        let rows: Vec<Vec<Option<Hit>>> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut cache = BlockCache::default();
                (0..w)
                    .map(|x| self.march(&cam_to_vol, k, x, y, &bounds, options, &mut cache))
                    .collect()
            })
            .collect();
        let mut maps = RenderMaps::invalid(w, h);
        let rot = vol_to_cam.rotation();
        for (y, row) in rows.into_iter().enumerate() {
            for (x, hit) in row.into_iter().enumerate() {
                if let Some(hit) = hit {
                    maps.vertex[(x, y)] = hit.vertex;
                    maps.normal[(x, y)] = rot * hit.normal;
                    maps.color[(x, y)] = hit.color;
                    maps.label[(x, y)] = options.label;
                }
            }
        }
        Ok(maps)
    }

    #[allow(clippy::too_many_arguments)]
    fn march(
        &self,
        cam_to_vol: &Pose,
        k: &Intrinsics,
        x: usize,
        y: usize,
        bounds: &(Vector3<f64>, Vector3<f64>),
        options: &RaycastOptions,
        cache: &mut BlockCache,
    ) -> Option<Hit> {
        let ray_cam = k.ray(x as f64, y as f64);
        let origin = *cam_to_vol.translation();
        let dir = cam_to_vol.transform_vector(&ray_cam);
        let range = self.depth_range;
        let (t0, t1) = clip_to_box(&origin, &dir, bounds, range.min, range.max)?;
        let l = self.voxel_length;
        let step = l / dir.norm();
        let block_len = self.block_length();
        let far_step = self.trunc_dist / dir.norm();
        let mut t = t0;
        let mut prev: Option<(f64, f64)> = None;
        while t <= t1 {
            let p = origin + dir * t;
            let coord = self.block_of(&p);
            if !self.contains_block(&coord) {
                // jump to where the ray leaves this empty block
                let lo = Vector3::new(coord[0] as f64, coord[1] as f64, coord[2] as f64) * block_len;
                let hi = lo + Vector3::repeat(block_len);
                let exit = exit_param(&origin, &dir, &lo, &hi).unwrap_or(t);
                t = exit.max(t) + 1e-6 * step + 1e-9;
                prev = None;
                continue;
            }
            let Some(cur) = self.sample_tsdf(&p, cache) else {
                prev = None;
                t += step;
                continue;
            };
            if let Some((t_prev, s_prev)) = prev {
                if s_prev > 0.0 && cur <= 0.0 {
                    let t_hit = t_prev + (t - t_prev) * s_prev / (s_prev - cur);
                    let p_hit = origin + dir * t_hit;
                    if let Some(hit) = self.surface_at(&p_hit, &ray_cam, t_hit, options, cache) {
                        return Some(hit);
                    }
                }
            }
            prev = Some((t, cur));
            // well outside the surface the sample bounds the clearance, so
            // stride by half of it; near the surface march voxel by voxel
            t += if cur > 0.5 { step.max(0.5 * cur * far_step) } else { step };
        }
        None
    }

    fn surface_at(
        &self,
        p: &Vector3<f64>,
        ray_cam: &Vector3<f64>,
        t_hit: f64,
        options: &RaycastOptions,
        cache: &mut BlockCache,
    ) -> Option<Hit> {
        if let Some(min_ratio) = options.min_fg_ratio {
            let g = p / self.voxel_length;
            let nearest = [g.x.round() as i64, g.y.round() as i64, g.z.round() as i64];
            let v = self.voxel_cached(nearest, cache)?;
            if v.foreground_ratio() <= min_ratio {
                return None;
            }
        }
        let normal = self.gradient(p, cache)?;
        let (_, color) = self.sample(p, cache)?;
        Some(Hit {
            vertex: ray_cam * t_hit,
            normal,
            color: luma(color),
        })
    }
}

/// Intersection of `origin + t·dir` with an axis-aligned box, clipped to
/// `[t_min, t_max]`.
fn clip_to_box(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    (lo, hi): &(Vector3<f64>, Vector3<f64>),
    t_min: f64,
    t_max: f64,
) -> Option<(f64, f64)> {
    let mut a = t_min;
    let mut b = t_max;
    for i in 0..3 {
        if dir[i].abs() < 1e-15 {
            if origin[i] < lo[i] || origin[i] > hi[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[i];
        let (mut ta, mut tb) = ((lo[i] - origin[i]) * inv, (hi[i] - origin[i]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        a = a.max(ta);
        b = b.min(tb);
        if a > b {
            return None;
        }
    }
    Some((a, b))
}

fn exit_param(origin: &Vector3<f64>, dir: &Vector3<f64>, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Option<f64> {
    let mut exit = f64::INFINITY;
    for i in 0..3 {
        if dir[i] > 0.0 {
            exit = exit.min((hi[i] - origin[i]) / dir[i]);
        } else if dir[i] < 0.0 {
            exit = exit.min((lo[i] - origin[i]) / dir[i]);
        }
    }
    exit.is_finite().then_some(exit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Image, RgbdFrame};
    use crate::volume::{IntegrateMode, TsdfConfig};

    fn k() -> Intrinsics {
        Intrinsics::new(160.0, 160.0, 79.5, 59.5, 160, 120).unwrap()
    }

    fn frame(depth: Image<f64>) -> RgbdFrame {
        let color = Image::from_fn(depth.width(), depth.height(), |x, _| {
            let v = (x as f64 / 160.0).clamp(0.0, 1.0);
            [v, v, v]
        });
        RgbdFrame::new(0, 0.0, color, depth).unwrap()
    }

    fn sphere_depth(k: &Intrinsics, center: Vector3<f64>, radius: f64) -> Image<f64> {
        Image::from_fn(k.width, k.height, |x, y| {
            let r = k.ray(x as f64, y as f64);
            let a = r.dot(&r);
            let b = -2.0 * r.dot(&center);
            let c = center.dot(&center) - radius * radius;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                0.0
            } else {
                (-b - disc.sqrt()) / (2.0 * a)
            }
        })
    }

    #[test]
    fn empty_volume_renders_nothing() {
        let vol = ScalableTsdfVolume::new(TsdfConfig::with_voxel_length(0.01));
        let maps = vol.raycast(&Pose::identity(), &k()).unwrap();
        assert_eq!(maps.valid_count(), 0);
    }

    #[test]
    fn sphere_round_trip_depth_error_below_voxel() {
        let k = k();
        let center = Vector3::new(0.0, 0.0, 1.5);
        let depth = sphere_depth(&k, center, 0.5);
        let f = frame(depth.clone());
        let l = 0.01;
        let mut vol = ScalableTsdfVolume::new(TsdfConfig::with_voxel_length(l));
        vol.integrate(&f, None, &Pose::identity(), &k, IntegrateMode::Plain).unwrap();
        let maps = vol.raycast(&Pose::identity(), &k).unwrap();
        let mut sq = 0.0;
        let mut n = 0;
        for (x, y, label) in maps.label.enumerate() {
            if label.is_valid() && depth[(x, y)] > 0.0 {
                let e = maps.vertex[(x, y)].z - depth[(x, y)];
                sq += e * e;
                n += 1;
            }
        }
        assert!(n > 1000);
        let rms = (sq / n as f64).sqrt();
        assert!(rms < l, "rms {rms}");
        for (x, y, label) in maps.label.enumerate() {
            if label.is_valid() {
                assert!((maps.normal[(x, y)].norm() - 1.0).abs() < 1e-5);
                assert!(maps.vertex[(x, y)].z > 0.0);
            }
        }
    }

    #[test]
    fn plane_round_trip_normals() {
        let k = k();
        let f = frame(Image::filled(k.width, k.height, 1.0));
        let mut vol = ScalableTsdfVolume::new(TsdfConfig::with_voxel_length(0.01));
        vol.integrate(&f, None, &Pose::identity(), &k, IntegrateMode::Plain).unwrap();
        let maps = vol.raycast(&Pose::identity(), &k).unwrap();
        let valid = maps.valid_count();
        assert!(valid > k.pixel_count() * 9 / 10);
        let good = maps
            .label
            .enumerate()
            .filter(|(x, y, l)| {
                l.is_valid() && maps.normal[(*x, *y)].dot(&Vector3::new(0.0, 0.0, -1.0)) > 1f64.to_radians().cos()
            })
            .count();
        assert!(good as f64 >= 0.95 * valid as f64);
    }

    #[test]
    fn offloaded_volume_refuses_raycast() {
        let k = k();
        let f = frame(Image::filled(k.width, k.height, 1.0));
        let mut vol = ScalableTsdfVolume::new(TsdfConfig::with_voxel_length(0.02));
        vol.integrate(&f, None, &Pose::identity(), &k, IntegrateMode::Plain).unwrap();
        let dir = tempfile::tempdir().unwrap();
        vol.offload(dir.path().join("v.bin")).unwrap();
        assert!(matches!(vol.raycast(&Pose::identity(), &k), Err(VolumeError::Offloaded(_))));
        vol.reload().unwrap();
        assert!(vol.raycast(&Pose::identity(), &k).unwrap().valid_count() > 0);
    }
}
