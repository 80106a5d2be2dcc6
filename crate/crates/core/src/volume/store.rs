//! Offload record, little-endian:
//!
//! ```text
//! f64 voxel_length | f64 trunc_dist | u64 block_count
//! block_count × ( i32 x | i32 y | i32 z | 4096 × voxel )
//! voxel = f32 tsdf | f32 weight | f32 r | f32 g | f32 b | u32 fg_count | u32 bg_count
//! ```
//!
//! Voxels are written in block order `x + 16·(y + 16·z)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rustc_hash::FxHashMap;

use super::tsdf::{Location, ScalableTsdfVolume, Voxel, VoxelBlock, BLOCK_VOXELS};
use super::VolumeError;

/// Header fields plus blocks, as stored on disk.
pub struct VolumeRecord {
    pub voxel_length: f64,
    pub trunc_dist: f64,
    pub blocks: Vec<VoxelBlock>,
}

pub fn write_volume(path: &Path, voxel_length: f64, trunc_dist: f64, blocks: &[VoxelBlock]) -> Result<(), VolumeError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&voxel_length.to_le_bytes())?;
    w.write_all(&trunc_dist.to_le_bytes())?;
    w.write_all(&(blocks.len() as u64).to_le_bytes())?;
    for block in blocks {
        if block.voxels.len() != BLOCK_VOXELS {
            return Err(VolumeError::Corrupt(format!("block {:?} has no payload", block.coord)));
        }
        for c in block.coord {
            w.write_all(&c.to_le_bytes())?;
        }
        for v in &block.voxels {
            w.write_all(&v.tsdf.to_le_bytes())?;
            w.write_all(&v.weight.to_le_bytes())?;
            for c in v.color {
                w.write_all(&c.to_le_bytes())?;
            }
            w.write_all(&v.fg_count.to_le_bytes())?;
            w.write_all(&v.bg_count.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<VolumeRecord, VolumeError> {
    let mut r = BufReader::new(File::open(path)?);
    let voxel_length = f64::from_le_bytes(read_array(&mut r)?);
    let trunc_dist = f64::from_le_bytes(read_array(&mut r)?);
    let count = u64::from_le_bytes(read_array(&mut r)?);
    if !(voxel_length > 0.0) || !(trunc_dist > 0.0) {
        return Err(VolumeError::Corrupt("non-positive voxel length or truncation".into()));
    }
    let mut blocks = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let coord = [
            i32::from_le_bytes(read_array(&mut r)?),
            i32::from_le_bytes(read_array(&mut r)?),
            i32::from_le_bytes(read_array(&mut r)?),
        ];
        let mut voxels = Vec::with_capacity(BLOCK_VOXELS);
        let mut buf = [0u8; 28];
        for _ in 0..BLOCK_VOXELS {
            r.read_exact(&mut buf)?;
            let f = |i: usize| f32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
            let u = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
            voxels.push(Voxel {
                tsdf: f(0),
                weight: f(4),
                color: [f(8), f(12), f(16)],
                fg_count: u(20),
                bg_count: u(24),
            });
        }
        blocks.push(VoxelBlock { coord, voxels });
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(VolumeError::Corrupt("trailing bytes after last block".into()));
    }
    Ok(VolumeRecord {
        voxel_length,
        trunc_dist,
        blocks,
    })
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], VolumeError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

impl ScalableTsdfVolume {
    /// Writes the voxel payload to `path` and releases it from memory. Block
    /// coordinates stay resident so visibility can still be evaluated.
    pub fn offload(&mut self, path: impl Into<PathBuf>) -> Result<(), VolumeError> {
        self.ensure_active()?;
        let path = path.into();
        write_volume(&path, self.voxel_length, self.trunc_dist, &self.blocks)?;
        for b in &mut self.blocks {
            b.voxels = Vec::new();
        }
        self.location = Location::Offloaded(path);
        Ok(())
    }

    pub fn reload(&mut self) -> Result<(), VolumeError> {
        let Location::Offloaded(path) = &self.location else {
            return Err(VolumeError::NotOffloaded);
        };
        let record = read_volume(path)?;
        if record.voxel_length != self.voxel_length || record.trunc_dist != self.trunc_dist {
            return Err(VolumeError::Corrupt("header does not match volume".into()));
        }
        if record.blocks.len() != self.blocks.len()
            || record.blocks.iter().zip(&self.blocks).any(|(a, b)| a.coord != b.coord)
        {
            return Err(VolumeError::Corrupt("block layout does not match volume".into()));
        }
        self.blocks = record.blocks;
        self.location = Location::Active;
        Ok(())
    }

    /// Rebuilds an active volume from an offload record.
    pub fn from_record(record: VolumeRecord, template: &ScalableTsdfVolume) -> ScalableTsdfVolume {
        let index: FxHashMap<_, _> = record
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (b.coord, i as u32))
            .collect();
        ScalableTsdfVolume {
            voxel_length: record.voxel_length,
            trunc_dist: record.trunc_dist,
            weight_cap: template.weight_cap,
            depth_range: template.depth_range,
            blocks: record.blocks,
            index,
            location: Location::Active,
        }
    }
}
