//! Point-cloud files and voxelization.

pub mod ply;
pub mod voxel;

pub use ply::{parse_ply, ply_bytes, read_ply, write_ply, PlyFormat, RawCloud};
pub use voxel::{grid_cloud, voxelize, voxelize_sequence, VoxelTransform};
