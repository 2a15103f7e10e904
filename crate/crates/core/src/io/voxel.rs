//! Quantization of real-valued clouds onto the integer grid.

use crate::error::{Error, Result};
use crate::io::ply::RawCloud;
use crate::tensor::{Coord3, SparseTensor3, MAX_BIT_DEPTH};

/// Affine map `voxel = round((p - offset) * scale)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelTransform {
    pub offset: [f64; 3],
    pub scale: f64,
    pub bit_depth: u8,
}

fn check_depth(bit_depth: u8) -> Result<()> {
    if bit_depth == 0 || bit_depth > MAX_BIT_DEPTH {
        return Err(Error::Config(format!("bit depth {bit_depth} outside 1..={MAX_BIT_DEPTH}")));
    }
    Ok(())
}

impl VoxelTransform {
    pub fn identity(bit_depth: u8) -> Self {
        Self { offset: [0.0; 3], scale: 1.0, bit_depth }
    }

    /// One transform covering every cloud, so a sequence shares a frame of
    /// reference. Clouds already on the grid keep their coordinates.
    pub fn fit<'a>(clouds: impl IntoIterator<Item = &'a RawCloud>, bit_depth: u8) -> Result<Self> {
        check_depth(bit_depth)?;
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut on_grid = true;
        let top = ((1u64 << bit_depth) - 1) as f64;
        let mut any = false;
        for p in clouds.into_iter().flat_map(|c| &c.points) {
            any = true;
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
                on_grid &= p[a].fract() == 0.0 && (0.0..=top).contains(&p[a]);
            }
        }
        if !any {
            return Err(Error::Metric("cannot voxelize an empty cloud".into()));
        }
        if on_grid {
            return Ok(Self::identity(bit_depth));
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let scale = if extent > 0.0 { top / extent } else { 1.0 };
        Ok(Self { offset: lo, scale, bit_depth })
    }

    /// Quantizes and merges points sharing a voxel.
    pub fn apply(&self, cloud: &RawCloud) -> Result<SparseTensor3> {
        if cloud.is_empty() {
            return Err(Error::Metric("cannot voxelize an empty cloud".into()));
        }
        let top = ((1u64 << self.bit_depth) - 1) as f64;
        let mut coords: Vec<Coord3> = cloud
            .points
            .iter()
            .map(|p| {
                let q = |a: usize| ((p[a] - self.offset[a]) * self.scale).round().clamp(0.0, top) as u32;
                Coord3::new(q(0), q(1), q(2))
            })
            .collect();
        coords.sort_unstable_by_key(|c| (c.x, c.y, c.z));
        coords.dedup();
        SparseTensor3::from_coords(coords, self.bit_depth)
    }

    /// Voxel centers mapped back to the input units.
    pub fn inverse(&self, tensor: &SparseTensor3) -> RawCloud {
        let back = |v: u32, a: usize| v as f64 / self.scale + self.offset[a];
        RawCloud {
            points: tensor.coords().iter().map(|c| [back(c.x, 0), back(c.y, 1), back(c.z, 2)]).collect(),
            comments: Vec::new(),
        }
    }
}

/// Integer voxel coordinates tagged with a `bit_depth` comment.
pub fn grid_cloud(tensor: &SparseTensor3) -> RawCloud {
    RawCloud {
        points: tensor.coords().iter().map(|c| [c.x as f64, c.y as f64, c.z as f64]).collect(),
        comments: vec![format!("bit_depth {}", tensor.bit_depth())],
    }
}

/// Voxelizes one cloud with its own fitted transform.
pub fn voxelize(cloud: &RawCloud, bit_depth: u8) -> Result<(SparseTensor3, VoxelTransform)> {
    let t = VoxelTransform::fit([cloud], bit_depth)?;
    Ok((t.apply(cloud)?, t))
}

/// Voxelizes a sequence with one shared transform.
pub fn voxelize_sequence(clouds: &[RawCloud], bit_depth: u8) -> Result<(Vec<SparseTensor3>, VoxelTransform)> {
    let t = VoxelTransform::fit(clouds, bit_depth)?;
    let frames = clouds.iter().map(|c| t.apply(c)).collect::<Result<_>>()?;
    Ok((frames, t))
}
