use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rayon::prelude::*;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use super::VolumeError;
use crate::geom::{DepthRange, Intrinsics, Mask, Pose, RgbdFrame};

pub const BLOCK_SIDE: usize = 16;
pub const BLOCK_VOXELS: usize = BLOCK_SIDE * BLOCK_SIDE * BLOCK_SIDE;

pub type BlockCoord = [i32; 3];

/// One grid sample. `tsdf` is normalized by the truncation distance.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Voxel {
    pub tsdf: f32,
    pub weight: f32,
    pub color: [f32; 3],
    pub fg_count: u32,
    pub bg_count: u32,
}

impl Voxel {
    pub fn observed(&self) -> bool {
        self.weight > 0.0
    }

    /// `fg / (fg + bg)`, zero when the voxel was never counted.
    pub fn foreground_ratio(&self) -> f32 {
        let total = self.fg_count + self.bg_count;
        if total == 0 {
            0.0
        } else {
            self.fg_count as f32 / total as f32
        }
    }
}

/// 16³ voxels; voxel `(x, y, z)` lives at index `x + 16·(y + 16·z)`.
/// The payload is empty while the owning volume is offloaded.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelBlock {
    pub coord: BlockCoord,
    pub voxels: Vec<Voxel>,
}

#[inline]
pub(crate) fn voxel_index(x: usize, y: usize, z: usize) -> usize {
    x + BLOCK_SIDE * (y + BLOCK_SIDE * z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntegrateMode {
    Foreground,
    Background,
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsdfConfig {
    pub voxel_length: f64,
    /// Truncation distance in metres; `None` selects five voxel lengths.
    pub trunc_dist: Option<f64>,
    pub weight_cap: f32,
    pub depth_range: DepthRange,
}

impl TsdfConfig {
    pub fn with_voxel_length(voxel_length: f64) -> Self {
        TsdfConfig {
            voxel_length,
            trunc_dist: None,
            weight_cap: 255.0,
            depth_range: DepthRange::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IntegrateStats {
    /// Mask pixels with valid depth that were cast into the volume.
    pub rays: usize,
    pub new_blocks: usize,
    pub updated_voxels: usize,
}

/// Zero-crossing sample in the volume frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub color: [f32; 3],
    pub fg_count: u32,
    pub bg_count: u32,
}

impl SurfacePoint {
    pub fn foreground_ratio(&self) -> f32 {
        let total = self.fg_count + self.bg_count;
        if total == 0 {
            0.0
        } else {
            self.fg_count as f32 / total as f32
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Location {
    Active,
    Offloaded(PathBuf),
}

/// Spatially hashed TSDF. Blocks are stored densely in allocation order and
/// addressed through `index`.
#[derive(Clone, Debug)]
pub struct ScalableTsdfVolume {
    pub(crate) voxel_length: f64,
    pub(crate) trunc_dist: f64,
    pub(crate) weight_cap: f32,
    pub(crate) depth_range: DepthRange,
    pub(crate) blocks: Vec<VoxelBlock>,
    pub(crate) index: FxHashMap<BlockCoord, u32>,
    pub(crate) location: Location,
}

/// Running cache of the last block hit by a lookup.
#[derive(Clone, Copy, Default)]
pub(crate) struct BlockCache {
    last: Option<(BlockCoord, u32)>,
}

impl ScalableTsdfVolume {
    /// Panics unless `trunc_dist ≥ 2·voxel_length` and `voxel_length > 0`.
    pub fn new(config: TsdfConfig) -> Self {
        let trunc_dist = config.trunc_dist.unwrap_or(5.0 * config.voxel_length);
        assert!(config.voxel_length > 0.0, "voxel length must be positive");
        assert!(
            trunc_dist >= 2.0 * config.voxel_length - 1e-12,
            "truncation must span at least two voxels"
        );
        ScalableTsdfVolume {
            voxel_length: config.voxel_length,
            trunc_dist,
            weight_cap: config.weight_cap,
            depth_range: config.depth_range,
            blocks: Vec::new(),
            index: FxHashMap::default(),
            location: Location::Active,
        }
    }

    pub fn voxel_length(&self) -> f64 {
        self.voxel_length
    }

    pub fn trunc_dist(&self) -> f64 {
        self.trunc_dist
    }

    pub fn block_length(&self) -> f64 {
        self.voxel_length * BLOCK_SIDE as f64
    }

    pub fn weight_cap(&self) -> f32 {
        self.weight_cap
    }

    pub fn depth_range(&self) -> DepthRange {
        self.depth_range
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn is_offloaded(&self) -> bool {
        matches!(self.location, Location::Offloaded(_))
    }

    pub fn offload_path(&self) -> Option<&Path> {
        match &self.location {
            Location::Offloaded(p) => Some(p),
            Location::Active => None,
        }
    }

    pub fn blocks(&self) -> &[VoxelBlock] {
        &self.blocks
    }

    pub fn block_coords(&self) -> impl Iterator<Item = BlockCoord> + '_ {
        self.blocks.iter().map(|b| b.coord)
    }

    pub fn contains_block(&self, coord: &BlockCoord) -> bool {
        self.index.contains_key(coord)
    }

    pub(crate) fn ensure_active(&self) -> Result<(), VolumeError> {
        match &self.location {
            Location::Active => Ok(()),
            Location::Offloaded(p) => Err(VolumeError::Offloaded(p.clone())),
        }
    }

    /// Drops every block while keeping the volume's parameters.
    pub fn reset(&mut self) {
        self.blocks.clear();
        self.index.clear();
        self.location = Location::Active;
    }

    /// Block containing a volume-frame point.
    pub fn block_of(&self, p: &Vector3<f64>) -> BlockCoord {
        let s = self.block_length();
        [
            (p.x / s).floor() as i32,
            (p.y / s).floor() as i32,
            (p.z / s).floor() as i32,
        ]
    }

    pub fn block_center(&self, coord: &BlockCoord) -> Vector3<f64> {
        let s = self.block_length();
        Vector3::new(
            (coord[0] as f64 + 0.5) * s,
            (coord[1] as f64 + 0.5) * s,
            (coord[2] as f64 + 0.5) * s,
        )
    }

    /// Voxel at integer grid coordinate `g` (grid point `g·voxel_length`).
    pub fn voxel_at(&self, g: [i64; 3]) -> Option<&Voxel> {
        self.voxel_cached(g, &mut BlockCache::default())
    }

    #[inline]
    pub(crate) fn voxel_cached(&self, g: [i64; 3], cache: &mut BlockCache) -> Option<&Voxel> {
        let side = BLOCK_SIDE as i64;
        let coord = [
            g[0].div_euclid(side) as i32,
            g[1].div_euclid(side) as i32,
            g[2].div_euclid(side) as i32,
        ];
        let slot = match cache.last {
            Some((c, s)) if c == coord => s,
            _ => {
                let s = *self.index.get(&coord)?;
                cache.last = Some((coord, s));
                s
            }
        };
        let voxels = &self.blocks[slot as usize].voxels;
        if voxels.is_empty() {
            return None;
        }
        let idx = voxel_index(
            g[0].rem_euclid(side) as usize,
            g[1].rem_euclid(side) as usize,
            g[2].rem_euclid(side) as usize,
        );
        Some(&voxels[idx])
    }

    /// Fuses the masked pixels of `frame`, allocating blocks along each ray
    /// within the truncation band of its depth sample. `mask = None` uses
    /// every pixel.
    pub fn integrate(
        &mut self,
        frame: &RgbdFrame,
        mask: Option<&Mask>,
        cam_to_vol: &Pose,
        k: &Intrinsics,
        mode: IntegrateMode,
    ) -> Result<IntegrateStats, VolumeError> {
        self.integrate_impl(frame, mask, cam_to_vol, k, mode, true)
    }

    /// Like [`integrate`](Self::integrate) but only updates blocks that are
    /// already allocated.
    pub fn integrate_existing(
        &mut self,
        frame: &RgbdFrame,
        mask: Option<&Mask>,
        cam_to_vol: &Pose,
        k: &Intrinsics,
        mode: IntegrateMode,
    ) -> Result<IntegrateStats, VolumeError> {
        self.integrate_impl(frame, mask, cam_to_vol, k, mode, false)
    }

    fn integrate_impl(
        &mut self,
        frame: &RgbdFrame,
        mask: Option<&Mask>,
        cam_to_vol: &Pose,
        k: &Intrinsics,
        mode: IntegrateMode,
        allocate: bool,
    ) -> Result<IntegrateStats, VolumeError> {
        self.ensure_active()?;
        if let Some(m) = mask {
            if !m.same_size(&frame.depth) {
                return Err(VolumeError::MaskMismatch {
                    mask_w: m.width(),
                    mask_h: m.height(),
                    frame_w: frame.width(),
                    frame_h: frame.height(),
                });
            }
        }
        let width = frame.width();
        let range = self.depth_range;
        let selected = |x: usize, y: usize| -> bool {
            let d = frame.depth[(x, y)];
            d > 0.0 && range.contains(d) && mask.map_or(true, |m| m[(x, y)])
        };

        // Blocks crossed by the truncation band of every selected ray, gathered
        // row by row so that allocation order is deterministic.
        let block_len = self.block_length();
        let trunc = self.trunc_dist;
        let origin = *cam_to_vol.translation();
        let rows: Vec<(usize, Vec<BlockCoord>)> = (0..frame.height())
            .into_par_iter()
            .map(|y| {
                let mut seen = FxHashSet::default();
                let mut coords = Vec::new();
                let mut rays = 0;
                for x in 0..width {
                    if !selected(x, y) {
                        continue;
                    }
                    rays += 1;
                    let d = frame.depth[(x, y)];
                    let dir = cam_to_vol.transform_vector(&k.ray(x as f64, y as f64));
                    let p0 = origin + dir * (d - trunc).max(0.0);
                    let p1 = origin + dir * (d + trunc);
                    traverse_blocks(&p0, &p1, block_len, |c| {
                        if seen.insert(c) {
                            coords.push(c);
                        }
                    });
                }
                (rays, coords)
            })
            .collect();

        let mut stats = IntegrateStats::default();
        let mut touched = vec![false; self.blocks.len()];
        for (rays, coords) in rows {
            stats.rays += rays;
            for c in coords {
                match self.index.get(&c) {
                    Some(&slot) => touched[slot as usize] = true,
                    None if allocate => {
                        let slot = self.blocks.len() as u32;
                        self.blocks.push(VoxelBlock {
                            coord: c,
                            voxels: vec![Voxel::default(); BLOCK_VOXELS],
                        });
                        self.index.insert(c, slot);
                        touched.push(true);
                        stats.new_blocks += 1;
                    }
                    None => {}
                }
            }
        }

        let vol_to_cam = cam_to_vol.inverse();
        let l = self.voxel_length;
        let cap = self.weight_cap;
        let updated: usize = self
            .blocks
            .par_iter_mut()
            .zip(touched.par_iter())
            .filter(|(_, &t)| t)
            .map(|(block, _)| {
                update_block(block, frame, mask, &vol_to_cam, k, l, trunc, cap, range, mode)
            })
            .sum();
        stats.updated_voxels = updated;
        Ok(stats)
    }

    /// Fraction of allocated blocks whose center projects into the image at
    /// an accepted depth.
    pub fn visible_ratio(&self, vol_to_cam: &Pose, k: &Intrinsics) -> Result<f64, VolumeError> {
        if self.blocks.is_empty() {
            return Err(VolumeError::EmptyVolume);
        }
        let visible = self
            .blocks
            .iter()
            .filter(|b| {
                let c = vol_to_cam.transform_point(&self.block_center(&b.coord));
                self.depth_range.contains(c.z) && k.project(&c).map_or(false, |uv| k.contains(&uv))
            })
            .count();
        Ok(visible as f64 / self.blocks.len() as f64)
    }

    /// Trilinearly interpolated `(tsdf, color)`; `None` unless all eight
    /// surrounding grid points are observed.
    #[inline]
    pub(crate) fn sample(&self, p: &Vector3<f64>, cache: &mut BlockCache) -> Option<(f64, [f64; 3])> {
        let g = p / self.voxel_length;
        let base = [g.x.floor(), g.y.floor(), g.z.floor()];
        let f = [g.x - base[0], g.y - base[1], g.z - base[2]];
        let b = [base[0] as i64, base[1] as i64, base[2] as i64];
        let mut tsdf = 0.0;
        let mut color = [0.0; 3];
        for corner in 0..8 {
            let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            let v = self.voxel_cached([b[0] + dx, b[1] + dy, b[2] + dz], cache)?;
            if !v.observed() {
                return None;
            }
            let w = (if dx == 1 { f[0] } else { 1.0 - f[0] })
                * (if dy == 1 { f[1] } else { 1.0 - f[1] })
                * (if dz == 1 { f[2] } else { 1.0 - f[2] });
            tsdf += w * v.tsdf as f64;
            for i in 0..3 {
                color[i] += w * v.color[i] as f64;
            }
        }
        Some((tsdf, color))
    }

    #[inline]
    pub(crate) fn sample_tsdf(&self, p: &Vector3<f64>, cache: &mut BlockCache) -> Option<f64> {
        let g = p / self.voxel_length;
        let base = [g.x.floor(), g.y.floor(), g.z.floor()];
        let f = [g.x - base[0], g.y - base[1], g.z - base[2]];
        let b = [base[0] as i64, base[1] as i64, base[2] as i64];
        let mut tsdf = 0.0;
        for corner in 0..8 {
            let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            let v = self.voxel_cached([b[0] + dx, b[1] + dy, b[2] + dz], cache)?;
            if !v.observed() {
                return None;
            }
            let w = (if dx == 1 { f[0] } else { 1.0 - f[0] })
                * (if dy == 1 { f[1] } else { 1.0 - f[1] })
                * (if dz == 1 { f[2] } else { 1.0 - f[2] });
            tsdf += w * v.tsdf as f64;
        }
        Some(tsdf)
    }

    /// Normalized TSDF gradient by central differences one voxel apart.
    pub(crate) fn gradient(&self, p: &Vector3<f64>, cache: &mut BlockCache) -> Option<Vector3<f64>> {
        let h = self.voxel_length;
        let mut g = Vector3::zeros();
        for axis in 0..3 {
            let mut e = Vector3::zeros();
            e[axis] = h;
            let a = self.sample_tsdf(&(p + e), cache)?;
            let b = self.sample_tsdf(&(p - e), cache)?;
            g[axis] = a - b;
        }
        let n = g.norm();
        if n < 1e-12 {
            None
        } else {
            Some(g / n)
        }
    }

    /// One point per sign change between axis-adjacent observed voxels.
    /// With `foreground_only`, points whose nearer voxel has a foreground
    /// ratio at or below `fg_ratio_threshold` are dropped.
    pub fn extract_surface_points(
        &self,
        foreground_only: bool,
        fg_ratio_threshold: f32,
    ) -> Result<Vec<SurfacePoint>, VolumeError> {
        self.ensure_active()?;
        let l = self.voxel_length;
        let side = BLOCK_SIDE as i64;
        let per_block: Vec<Vec<SurfacePoint>> = self
            .blocks
            .par_iter()
            .map(|block| {
                let mut cache = BlockCache::default();
                let mut out = Vec::new();
                let origin = [
                    block.coord[0] as i64 * side,
                    block.coord[1] as i64 * side,
                    block.coord[2] as i64 * side,
                ];
                for z in 0..BLOCK_SIDE {
                    for y in 0..BLOCK_SIDE {
                        for x in 0..BLOCK_SIDE {
                            let a = &block.voxels[voxel_index(x, y, z)];
                            if !a.observed() {
                                continue;
                            }
                            let g = [origin[0] + x as i64, origin[1] + y as i64, origin[2] + z as i64];
                            for axis in 0..3 {
                                let mut gn = g;
                                gn[axis] += 1;
                                let Some(b) = self.voxel_cached(gn, &mut cache) else { continue };
                                if !b.observed() || (a.tsdf >= 0.0) == (b.tsdf >= 0.0) {
                                    continue;
                                }
                                let near = if a.tsdf.abs() <= b.tsdf.abs() { a } else { b };
                                if foreground_only && near.foreground_ratio() <= fg_ratio_threshold {
                                    continue;
                                }
                                let s = (a.tsdf / (a.tsdf - b.tsdf)) as f64;
                                let mut pos = Vector3::new(g[0] as f64, g[1] as f64, g[2] as f64) * l;
                                pos[axis] += s * l;
                                let normal = self.gradient(&pos, &mut cache).unwrap_or_else(|| {
                                    let mut n = Vector3::zeros();
                                    n[axis] = if b.tsdf > a.tsdf { 1.0 } else { -1.0 };
                                    n
                                });
                                let mut color = [0.0f32; 3];
                                for i in 0..3 {
                                    color[i] = a.color[i] + (s as f32) * (b.color[i] - a.color[i]);
                                }
                                out.push(SurfacePoint {
                                    position: pos,
                                    normal,
                                    color,
                                    fg_count: near.fg_count,
                                    bg_count: near.bg_count,
                                });
                            }
                        }
                    }
                }
                out
            })
            .collect();
        Ok(per_block.into_iter().flatten().collect())
    }

    /// Hash over block coordinates and raw voxel payloads, in allocation order.
    pub fn payload_checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        h.write_u64(self.voxel_length.to_bits());
        h.write_u64(self.trunc_dist.to_bits());
        for b in &self.blocks {
            for c in b.coord {
                h.write_i32(c);
            }
            for v in &b.voxels {
                h.write_u32(v.tsdf.to_bits());
                h.write_u32(v.weight.to_bits());
                for c in v.color {
                    h.write_u32(c.to_bits());
                }
                h.write_u32(v.fg_count);
                h.write_u32(v.bg_count);
            }
        }
        h.finish()
    }

    /// Axis-aligned bounds of all allocated blocks, `None` when empty.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let s = self.block_length();
        let mut lo = [i32::MAX; 3];
        let mut hi = [i32::MIN; 3];
        for b in &self.blocks {
            for i in 0..3 {
                lo[i] = lo[i].min(b.coord[i]);
                hi[i] = hi[i].max(b.coord[i]);
            }
        }
        if self.blocks.is_empty() {
            return None;
        }
        Some((
            Vector3::new(lo[0] as f64, lo[1] as f64, lo[2] as f64) * s,
            Vector3::new(hi[0] as f64 + 1.0, hi[1] as f64 + 1.0, hi[2] as f64 + 1.0) * s,
        ))
    }
}

#[allow(clippy::too_many_arguments)]
fn update_block(
    block: &mut VoxelBlock,
    frame: &RgbdFrame,
    mask: Option<&Mask>,
    vol_to_cam: &Pose,
    k: &Intrinsics,
    l: f64,
    trunc: f64,
    cap: f32,
    range: DepthRange,
    mode: IntegrateMode,
) -> usize {
    let r = vol_to_cam.rotation();
    let ax = r.column(0) * l;
    let ay = r.column(1) * l;
    let az = r.column(2) * l;
    let side = BLOCK_SIDE as f64;
    let corner = Vector3::new(
        block.coord[0] as f64 * side * l,
        block.coord[1] as f64 * side * l,
        block.coord[2] as f64 * side * l,
    );
    let base = vol_to_cam.transform_point(&corner);
    let w = frame.width() as i64;
    let h = frame.height() as i64;
    let mut updated = 0;
    for z in 0..BLOCK_SIDE {
        for y in 0..BLOCK_SIDE {
            let row = base + ay * y as f64 + az * z as f64;
            for x in 0..BLOCK_SIDE {
                let q = row + ax * x as f64;
                if q.z <= 0.0 {
                    continue;
                }
                let u = (k.fx * q.x / q.z + k.cx).round() as i64;
                let v = (k.fy * q.y / q.z + k.cy).round() as i64;
                if u < 0 || v < 0 || u >= w || v >= h {
                    continue;
                }
                let (u, v) = (u as usize, v as usize);
                if let Some(m) = mask {
                    if !m[(u, v)] {
                        continue;
                    }
                }
                let d = frame.depth[(u, v)];
                if d <= 0.0 || !range.contains(d) {
                    continue;
                }
                let sdf = d - q.z;
                if sdf < -trunc {
                    continue;
                }
                let tsdf = (sdf / trunc).min(1.0) as f32;
                let c = frame.color[(u, v)];
                let vox = &mut block.voxels[voxel_index(x, y, z)];
                let wt = vox.weight;
                let nw = wt + 1.0;
                vox.tsdf = (wt * vox.tsdf + tsdf) / nw;
                for i in 0..3 {
                    vox.color[i] = (wt * vox.color[i] + c[i] as f32) / nw;
                }
                vox.weight = nw.min(cap);
                match mode {
                    IntegrateMode::Foreground => vox.fg_count += 1,
                    IntegrateMode::Background => vox.bg_count += 1,
                    IntegrateMode::Plain => {}
                }
                updated += 1;
            }
        }
    }
    updated
}

/// Visits every block crossed by the segment `p0 → p1` (3-D DDA).
pub(crate) fn traverse_blocks(p0: &Vector3<f64>, p1: &Vector3<f64>, block_len: f64, mut visit: impl FnMut(BlockCoord)) {
    let a = p0 / block_len;
    let b = p1 / block_len;
    let mut cell = [a.x.floor() as i32, a.y.floor() as i32, a.z.floor() as i32];
    let end = [b.x.floor() as i32, b.y.floor() as i32, b.z.floor() as i32];
    let d = b - a;
    let mut step = [0i32; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for i in 0..3 {
        if d[i] > 0.0 {
            step[i] = 1;
            t_max[i] = ((cell[i] as f64 + 1.0) - a[i]) / d[i];
            t_delta[i] = 1.0 / d[i];
        } else if d[i] < 0.0 {
            step[i] = -1;
            t_max[i] = (a[i] - cell[i] as f64) / -d[i];
            t_delta[i] = -1.0 / d[i];
        }
    }
    let limit = (end[0] - cell[0]).abs() + (end[1] - cell[1]).abs() + (end[2] - cell[2]).abs() + 1;
    for _ in 0..=limit {
        visit(cell);
        if cell == end {
            break;
        }
        let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        if t_max[axis] > 1.0 {
            break;
        }
        cell[axis] += step[axis];
        t_max[axis] += t_delta[axis];
    }
}
