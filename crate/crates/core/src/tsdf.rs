//! Hash-blocked sparse truncated signed distance field.
//!
//! Space is tiled into cubic blocks of side `B = L·ϑ`. A block is allocated
//! when a surface point falls inside it (plus its 26 neighbors, so the whole
//! truncation band is representable). Each block stores `L³` voxels holding a
//! normalized signed distance in `[-1, 1]` and an accumulated weight.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::camera::{Camera, DepthImage, DepthRange};
use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::scalar::Real;

pub type BlockIndex = [i32; 3];

const KEY_BITS: u32 = 21;
const KEY_OFFSET: i64 = 1 << (KEY_BITS - 1);
const KEY_MASK: u64 = (1 << KEY_BITS) - 1;

/// Packs a block index into 64 bits (21 bits per axis, offset-shifted).
/// Injective for every component in `[-2²⁰, 2²⁰)`.
pub fn block_key(b: BlockIndex) -> u64 {
    let enc = |v: i32| ((v as i64 + KEY_OFFSET) as u64) & KEY_MASK;
    (enc(b[0]) << (2 * KEY_BITS)) | (enc(b[1]) << KEY_BITS) | enc(b[2])
}

pub fn block_from_key(key: u64) -> BlockIndex {
    let dec = |v: u64| ((v & KEY_MASK) as i64 - KEY_OFFSET) as i32;
    [dec(key >> (2 * KEY_BITS)), dec(key >> KEY_BITS), dec(key)]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TsdfConfig<T> {
    pub voxel_size: T,
    pub voxels_per_side: usize,
    pub truncation: T,
    pub weight_cap: T,
    pub origin: Vec3<T>,
}

impl<T: Real> TsdfConfig<T> {
    /// Defaults: truncation 8ϑ, weight cap 64, origin at zero.
    pub fn new(voxel_size: T, voxels_per_side: usize) -> Result<Self> {
        Self::with_truncation(voxel_size, voxels_per_side, voxel_size * T::lit(8.0))
    }

    pub fn with_truncation(voxel_size: T, voxels_per_side: usize, truncation: T) -> Result<Self> {
        let cfg = Self { voxel_size, voxels_per_side, truncation, weight_cap: T::lit(64.0), origin: Vec3::zero() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > T::zero()) || self.voxels_per_side == 0 {
            return Err(Error::InvalidInput("voxel size and voxels per side must be positive".into()));
        }
        if !(self.truncation > T::zero()) || !(self.weight_cap >= T::one()) {
            return Err(Error::InvalidInput("truncation must be positive and weight cap at least 1".into()));
        }
        Ok(())
    }

    pub fn block_size(&self) -> T {
        self.voxel_size * T::from_usize(self.voxels_per_side).unwrap()
    }

    pub fn voxels_per_block(&self) -> usize {
        self.voxels_per_side.pow(3)
    }

    pub fn block_of(&self, p: Vec3<T>) -> BlockIndex {
        p.cell_index(self.origin, self.block_size())
    }

    /// Global voxel index of local voxel `l` (flattened x-fastest) inside block `b`.
    pub fn global_voxel(&self, b: BlockIndex, l: usize) -> [i32; 3] {
        let n = self.voxels_per_side;
        let (lx, ly, lz) = (l % n, (l / n) % n, l / (n * n));
        let n = n as i32;
        [b[0] * n + lx as i32, b[1] * n + ly as i32, b[2] * n + lz as i32]
    }

    /// World-frame center of a global voxel index.
    pub fn voxel_center(&self, v: [i32; 3]) -> Vec3<T> {
        let half = T::lit(0.5);
        let c = |i: i32| (T::from_i32(i).unwrap() + half) * self.voxel_size;
        self.origin + Vec3::new(c(v[0]), c(v[1]), c(v[2]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsdfBlock<T> {
    pub index: BlockIndex,
    pub sdf: Vec<T>,
    pub weight: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct SparseTsdf<T> {
    cfg: TsdfConfig<T>,
    blocks: HashMap<u64, TsdfBlock<T>>,
}

/// Blocks containing at least one point, dilated by their 26-neighborhood; sorted.
pub fn activate_blocks<T: Real>(points: &[Vec3<T>], cfg: &TsdfConfig<T>) -> BTreeSet<BlockIndex> {
    let surface: BTreeSet<BlockIndex> = points.iter().map(|&p| cfg.block_of(p)).collect();
    let mut active = BTreeSet::new();
    for b in &surface {
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    active.insert([b[0] + dx, b[1] + dy, b[2] + dz]);
                }
            }
        }
    }
    active
}

/// Surface blocks only (no dilation).
pub fn surface_blocks<T: Real>(points: &[Vec3<T>], cfg: &TsdfConfig<T>) -> BTreeSet<BlockIndex> {
    points.iter().map(|&p| cfg.block_of(p)).collect()
}

/// Result of integrating one observation into one voxel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VoxelUpdate<T> {
    Skip,
    Observe(T),
}

/// Normalized truncated signed distance of `center` as seen by `cam`, or
/// `Skip` when the voxel is behind the camera, projects outside the image or
/// onto an invalid pixel, or lies more than one truncation distance behind the surface.
#[inline]
pub fn observe_voxel<T: Real>(
    center: Vec3<T>,
    depth: &DepthImage<T>,
    cam: &Camera<T>,
    range: &DepthRange<T>,
    truncation: T,
) -> VoxelUpdate<T> {
    let pc = cam.extrinsics.world_to_camera().apply(center);
    if !(pc.z > T::zero()) {
        return VoxelUpdate::Skip;
    }
    let (u, v) = cam.intrinsics.pixel_of(pc);
    let (u, v) = (u.round(), v.round());
    if u < T::zero() || v < T::zero() {
        return VoxelUpdate::Skip;
    }
    let (ui, vi) = (u.to_usize().unwrap_or(usize::MAX), v.to_usize().unwrap_or(usize::MAX));
    if ui >= depth.width() || vi >= depth.height() {
        return VoxelUpdate::Skip;
    }
    let d = depth.get(ui, vi);
    if !range.contains(d) {
        return VoxelUpdate::Skip;
    }
    let s = d - pc.z;
    if s < -truncation {
        return VoxelUpdate::Skip;
    }
    VoxelUpdate::Observe((s / truncation).max(-T::one()).min(T::one()))
}

/// Running weighted average with unit observation weight and a weight cap.
#[inline]
pub fn fuse_observation<T: Real>(sdf: &mut T, weight: &mut T, phi: T, cap: T) {
    *sdf = (*weight * *sdf + phi) / (*weight + T::one());
    *weight = (*weight + T::one()).min(cap);
}

impl<T: Real> SparseTsdf<T> {
    pub fn new(cfg: TsdfConfig<T>) -> Self {
        Self { cfg, blocks: HashMap::new() }
    }

    /// Allocates zero-weight blocks for every index in `active`.
    pub fn from_blocks(cfg: TsdfConfig<T>, active: &BTreeSet<BlockIndex>) -> Self {
        let mut tsdf = Self::new(cfg);
        tsdf.allocate(active);
        tsdf
    }

    pub fn allocate(&mut self, active: &BTreeSet<BlockIndex>) {
        let n = self.cfg.voxels_per_block();
        for &b in active {
            self.blocks.entry(block_key(b)).or_insert_with(|| TsdfBlock {
                index: b,
                sdf: vec![T::zero(); n],
                weight: vec![T::zero(); n],
            });
        }
    }

    pub fn config(&self) -> &TsdfConfig<T> {
        &self.cfg
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, b: BlockIndex) -> Option<&TsdfBlock<T>> {
        self.blocks.get(&block_key(b))
    }

    /// Blocks in ascending index order.
    pub fn sorted_blocks(&self) -> Vec<&TsdfBlock<T>> {
        let mut v: Vec<&TsdfBlock<T>> = self.blocks.values().collect();
        v.sort_by_key(|b| b.index);
        v
    }

    /// Signed distance and weight at a global voxel index, if its block is allocated.
    pub fn voxel(&self, v: [i32; 3]) -> Option<(T, T)> {
        let n = self.cfg.voxels_per_side as i32;
        let b = [v[0].div_euclid(n), v[1].div_euclid(n), v[2].div_euclid(n)];
        let block = self.block(b)?;
        let l = [v[0].rem_euclid(n), v[1].rem_euclid(n), v[2].rem_euclid(n)];
        let i = (l[0] + n * (l[1] + n * l[2])) as usize;
        Some((block.sdf[i], block.weight[i]))
    }

    /// Integrates one depth view into every allocated voxel; blocks are updated in parallel.
    pub fn integrate_view(&mut self, depth: &DepthImage<T>, cam: &Camera<T>, range: &DepthRange<T>) -> Result<()> {
        if depth.width() != cam.intrinsics.width || depth.height() != cam.intrinsics.height {
            return Err(Error::DimensionMismatch("depth image does not match camera intrinsics".into()));
        }
        let cfg = self.cfg;
        self.blocks.par_iter_mut().for_each(|(_, block)| {
            for l in 0..cfg.voxels_per_block() {
                let center = cfg.voxel_center(cfg.global_voxel(block.index, l));
                if let VoxelUpdate::Observe(phi) = observe_voxel(center, depth, cam, range, cfg.truncation) {
                    fuse_observation(&mut block.sdf[l], &mut block.weight[l], phi, cfg.weight_cap);
                }
            }
        });
        Ok(())
    }

    /// Rows `(x, y, z, s)` for voxels with positive weight strictly inside the band,
    /// in ascending block order then local voxel order.
    pub fn extract_pbar(&self) -> Vec<[T; 4]> {
        let mut rows = Vec::new();
        for block in self.sorted_blocks() {
            for l in 0..self.cfg.voxels_per_block() {
                let (s, w) = (block.sdf[l], block.weight[l]);
                if w > T::zero() && s.abs() < T::one() {
                    let c = self.cfg.voxel_center(self.cfg.global_voxel(block.index, l));
                    rows.push([c.x, c.y, c.z, s]);
                }
            }
        }
        rows
    }

    /// Number of voxels that `extract_pbar` would emit.
    pub fn band_voxel_count(&self) -> usize {
        self.blocks
            .values()
            .map(|b| b.sdf.iter().zip(&b.weight).filter(|(s, w)| **w > T::zero() && s.abs() < T::one()).count())
            .sum()
    }

    /// Writes the binary dump (little-endian):
    /// magic `b"STSDF\0\0\x01"`, block size f64, L u32, voxel size f64,
    /// truncation f64, weight cap f64, origin 3×f64, block count u64,
    /// then per block (ascending): index 3×i32 followed by L³ pairs
    /// (sdf f32, weight f32), local voxels x-fastest.
    pub fn write_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let c = &self.cfg;
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&c.block_size().as_f64().to_le_bytes())?;
        w.write_all(&(c.voxels_per_side as u32).to_le_bytes())?;
        for v in [c.voxel_size, c.truncation, c.weight_cap, c.origin.x, c.origin.y, c.origin.z] {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
        w.write_all(&(self.blocks.len() as u64).to_le_bytes())?;
        for b in self.sorted_blocks() {
            for i in b.index {
                w.write_all(&i.to_le_bytes())?;
            }
            for (s, wt) in b.sdf.iter().zip(&b.weight) {
                w.write_all(&(s.as_f64() as f32).to_le_bytes())?;
                w.write_all(&(wt.as_f64() as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_dump(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |r: &str| Error::Malformed { path: path.display().to_string(), reason: r.to_string() };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != DUMP_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut f8 = || -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
            Ok(f64::from_le_bytes(b))
        };
        let _block = f8()?;
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("truncated header"))?;
        let l = u32::from_le_bytes(b4) as usize;
        let mut vals = [0f64; 6];
        for v in vals.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
            *v = f64::from_le_bytes(b);
        }
        let mut cfg = TsdfConfig::with_truncation(T::lit(vals[0]), l, T::lit(vals[1]))?;
        cfg.weight_cap = T::lit(vals[2]);
        cfg.origin = Vec3::new(T::lit(vals[3]), T::lit(vals[4]), T::lit(vals[5]));
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| bad("truncated header"))?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut tsdf = Self::new(cfg);
        let n = cfg.voxels_per_block();
        for _ in 0..count {
            let mut index = [0i32; 3];
            for i in index.iter_mut() {
                r.read_exact(&mut b4).map_err(|_| bad("truncated block"))?;
                *i = i32::from_le_bytes(b4);
            }
            let mut sdf = Vec::with_capacity(n);
            let mut weight = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut b4).map_err(|_| bad("truncated block"))?;
                sdf.push(T::lit(f32::from_le_bytes(b4) as f64));
                r.read_exact(&mut b4).map_err(|_| bad("truncated block"))?;
                weight.push(T::lit(f32::from_le_bytes(b4) as f64));
            }
            tsdf.blocks.insert(block_key(index), TsdfBlock { index, sdf, weight });
        }
        Ok(tsdf)
    }
}

const DUMP_MAGIC: &[u8; 8] = b"STSDF\0\0\x01";
