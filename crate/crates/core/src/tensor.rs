//! Sparse 3D tensors over integer voxel coordinates.
//!
//! Coordinates are kept in Morton (z-order) order with x as the most
//! significant axis. Every layer and the entropy coder walk voxels in this
//! order, so it is part of the bitstream contract.

use std::fmt;

use crate::error::{Error, Result};

/// Largest supported bit depth; three 16-bit components fill 48 key bits.
pub const MAX_BIT_DEPTH: u8 = 16;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Coord3 {
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl Coord3 {
    pub const fn new(x: u32, y: u32, z: u32) -> Self {
        Self { x, y, z }
    }

    pub fn max_component(&self) -> u32 {
        self.x.max(self.y).max(self.z)
    }

    /// Componentwise floor division by two.
    pub fn parent(&self) -> Self {
        Self::new(self.x >> 1, self.y >> 1, self.z >> 1)
    }

    /// Child `2p + d` where `d` is given as an octant index.
    pub fn child(&self, octant: u8) -> Self {
        Self::new(
            (self.x << 1) | ((octant >> 2) & 1) as u32,
            (self.y << 1) | ((octant >> 1) & 1) as u32,
            (self.z << 1) | (octant & 1) as u32,
        )
    }

    /// Offset by a signed vector, `None` when any component would go negative.
    pub fn offset(&self, dx: i32, dy: i32, dz: i32) -> Option<Self> {
        let x = self.x as i64 + dx as i64;
        let y = self.y as i64 + dy as i64;
        let z = self.z as i64 + dz as i64;
        if x < 0 || y < 0 || z < 0 || x > u32::MAX as i64 || y > u32::MAX as i64 || z > u32::MAX as i64
        {
            return None;
        }
        Some(Self::new(x as u32, y as u32, z as u32))
    }

    /// Key without range checking; callers guarantee components < 2^16.
    pub(crate) fn key_unchecked(&self) -> u64 {
        (spread3(self.x) << 2) | (spread3(self.y) << 1) | spread3(self.z)
    }
}

impl fmt::Debug for Coord3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

impl From<(u32, u32, u32)> for Coord3 {
    fn from((x, y, z): (u32, u32, u32)) -> Self {
        Self::new(x, y, z)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct MortonKey(pub u64);

// Spread the low 16 bits of `v` so bit j lands on bit 3j.
fn spread3(v: u32) -> u64 {
    let mut x = (v & 0xffff) as u64;
    x = (x | (x << 16)) & 0x0000_ff00_00ff;
    x = (x | (x << 8)) & 0x00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x2492_4924_9249;
    x
}

fn compact3(k: u64) -> u32 {
    let mut x = k & 0x2492_4924_9249;
    x = (x | (x >> 2)) & 0x0c30_c30c_30c3;
    x = (x | (x >> 4)) & 0x00f0_0f00_f00f;
    x = (x | (x >> 8)) & 0x0000_ff00_00ff;
    x = (x | (x >> 16)) & 0xffff;
    x as u32
}

/// Interleaves the coordinate bits: bit j of x goes to key bit 3j+2, y to
/// 3j+1 and z to 3j.
pub fn morton_encode(c: Coord3) -> Result<MortonKey> {
    let max = c.max_component();
    if max >= 1 << MAX_BIT_DEPTH {
        return Err(Error::Range { value: max, bit_depth: MAX_BIT_DEPTH });
    }
    Ok(MortonKey(c.key_unchecked()))
}

pub fn morton_decode(key: MortonKey) -> Coord3 {
    Coord3::new(compact3(key.0 >> 2), compact3(key.0 >> 1), compact3(key.0))
}

/// Group id of a voxel inside its parent: `4(x mod 2) + 2(y mod 2) + (z mod 2)`.
pub fn octant_index(c: Coord3) -> u8 {
    (((c.x & 1) << 2) | ((c.y & 1) << 1) | (c.z & 1)) as u8
}

fn check_bit_depth(bit_depth: u8) -> Result<()> {
    if bit_depth > MAX_BIT_DEPTH {
        return Err(Error::Config(format!(
            "bit depth {bit_depth} exceeds the maximum of {MAX_BIT_DEPTH}"
        )));
    }
    Ok(())
}

/// Parents of a coordinate set, deduplicated and Morton-sorted.
pub fn downsample(coords: &[Coord3]) -> Vec<Coord3> {
    let mut keys: Vec<u64> = coords.iter().map(|c| c.key_unchecked() >> 3).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter().map(|k| morton_decode(MortonKey(k))).collect()
}

/// The eight children of every parent. For Morton-sorted parents the result is
/// Morton-sorted because the child key is `parent_key << 3 | octant`.
pub fn child_candidates(coords: &[Coord3]) -> Vec<Coord3> {
    let mut out = Vec::with_capacity(coords.len() * 8);
    for p in coords {
        for d in 0..8 {
            out.push(p.child(d));
        }
    }
    out
}

/// Sorted-and-unique check under the Morton key.
pub fn is_canonical(coords: &[Coord3]) -> bool {
    coords.windows(2).all(|w| w[0].key_unchecked() < w[1].key_unchecked())
}

/// Canonical sparse tensor: Morton-sorted unique coordinates with a
/// row-major feature matrix of `channels` columns.
#[derive(Clone, PartialEq)]
pub struct SparseTensor3 {
    coords: Vec<Coord3>,
    feats: Vec<f32>,
    channels: usize,
    bit_depth: u8,
}

impl fmt::Debug for SparseTensor3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SparseTensor3")
            .field("len", &self.coords.len())
            .field("channels", &self.channels)
            .field("bit_depth", &self.bit_depth)
            .finish()
    }
}

impl SparseTensor3 {
    /// Sorts `coords` (with their feature rows) into Morton order.
    ///
    /// Duplicate coordinates are rejected rather than merged.
    pub fn canonicalize(
        coords: Vec<Coord3>,
        feats: Vec<f32>,
        channels: usize,
        bit_depth: u8,
    ) -> Result<Self> {
        check_bit_depth(bit_depth)?;
        if channels == 0 {
            return Err(Error::Shape("channel count must be at least 1".into()));
        }
        if feats.len() != coords.len() * channels {
            return Err(Error::Shape(format!(
                "{} coordinates but {} feature values for {} channels",
                coords.len(),
                feats.len(),
                channels
            )));
        }
        if let Some(v) = feats.iter().find(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite feature value {v}")));
        }
        let limit = 1u64 << bit_depth;
        if let Some(c) = coords.iter().find(|c| c.max_component() as u64 >= limit) {
            return Err(Error::Range { value: c.max_component(), bit_depth });
        }
        let mut order: Vec<(u64, usize)> =
            coords.iter().enumerate().map(|(i, c)| (c.key_unchecked(), i)).collect();
        order.sort_unstable();
        if let Some(w) = order.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::DuplicateCoord(coords[w[0].1]));
        }
        let mut out_coords = Vec::with_capacity(coords.len());
        let mut out_feats = Vec::with_capacity(feats.len());
        for &(_, i) in &order {
            out_coords.push(coords[i]);
            out_feats.extend_from_slice(&feats[i * channels..(i + 1) * channels]);
        }
        Ok(Self { coords: out_coords, feats: out_feats, channels, bit_depth })
    }

    /// Geometry-only tensor: one all-ones channel.
    pub fn from_coords(coords: Vec<Coord3>, bit_depth: u8) -> Result<Self> {
        let n = coords.len();
        Self::canonicalize(coords, vec![1.0; n], 1, bit_depth)
    }

    /// Builds a tensor from coordinates that are already canonical.
    pub(crate) fn from_sorted(
        coords: Vec<Coord3>,
        feats: Vec<f32>,
        channels: usize,
        bit_depth: u8,
    ) -> Self {
        debug_assert_eq!(feats.len(), coords.len() * channels);
        debug_assert!(is_canonical(&coords));
        Self { coords, feats, channels, bit_depth }
    }

    pub fn empty(channels: usize, bit_depth: u8) -> Self {
        Self { coords: Vec::new(), feats: Vec::new(), channels, bit_depth }
    }

    pub fn coords(&self) -> &[Coord3] {
        &self.coords
    }

    pub fn feats(&self) -> &[f32] {
        &self.feats
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.feats[i * self.channels..(i + 1) * self.channels]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn into_parts(self) -> (Vec<Coord3>, Vec<f32>) {
        (self.coords, self.feats)
    }

    /// Parent coordinates at `bit_depth - 1`.
    pub fn downsample_coords(&self) -> Vec<Coord3> {
        downsample(&self.coords)
    }

    pub fn same_coords(&self, other: &SparseTensor3) -> bool {
        self.coords == other.coords
    }
}
