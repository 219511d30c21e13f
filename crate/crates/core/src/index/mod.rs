//! Voxel indexing backends: a dense voxel array and a voxel block hash.
//!
//! Both backends address voxels by signed integer voxel coordinates. A voxel
//! `v` represents the world point `(v + 0.5) * voxel_size`.

mod dense;
mod hash;

pub use dense::{DenseConfig, DenseVolume};
pub use hash::{
    hash_index, AllocTarget, HashConfig, HashEntry, HashTable, HashVolume, Inserted, InsertKind, Probe,
    VoxelBlockArray, SWAPPED_OUT, UNALLOCATED,
};

use nalgebra::Vector3;

use crate::voxel::Voxel;

/// Voxels per block edge.
pub const BLOCK_SIDE: i32 = 8;
/// Voxels per block.
pub const BLOCK_VOXELS: usize = 512;

/// Splits a voxel coordinate into its block position and the linear index
/// inside the block. Uses floor division so negative coordinates map
/// consistently.
#[inline]
pub fn voxel_to_block(point: Vector3<i32>) -> (Vector3<i32>, usize) {
    let block = point.map(|c| c.div_euclid(BLOCK_SIDE));
    let local = point.map(|c| c.rem_euclid(BLOCK_SIDE));
    (block, (local.x + local.y * BLOCK_SIDE + local.z * BLOCK_SIDE * BLOCK_SIDE) as usize)
}

/// Local voxel offset of a linear in-block index.
#[inline]
pub fn local_offset(linear_idx: usize) -> Vector3<i32> {
    let i = linear_idx as i32;
    Vector3::new(i % BLOCK_SIDE, (i / BLOCK_SIDE) % BLOCK_SIDE, i / (BLOCK_SIDE * BLOCK_SIDE))
}

/// World-space centre of a voxel, in the single-precision form consumed by
/// the integration update. All backends derive voxel centres through this
/// function.
#[inline]
pub fn voxel_center(voxel: Vector3<i32>, voxel_size: f32) -> Vector3<f32> {
    Vector3::new(
        (voxel.x as f32 + 0.5) * voxel_size,
        (voxel.y as f32 + 0.5) * voxel_size,
        (voxel.z as f32 + 0.5) * voxel_size,
    )
}

/// Voxel containing a world point.
#[inline]
pub fn world_to_voxel(p: &Vector3<f64>, voxel_size: f64) -> Vector3<i32> {
    p.map(|c| (c / voxel_size).floor() as i32)
}

/// Block containing a world point.
#[inline]
pub fn world_to_block(p: &Vector3<f64>, voxel_size: f64) -> Vector3<i32> {
    let block_len = voxel_size * BLOCK_SIDE as f64;
    p.map(|c| (c / block_len).floor() as i32)
}

/// Read access shared by both backends.
pub trait VolumeRead<V: Voxel>: Sync {
    fn voxel_size(&self) -> f32;

    /// Voxel at `point`, `None` when unallocated or out of bounds.
    fn read_voxel(&self, point: Vector3<i32>) -> Option<V>;

    /// Whether any voxel data exists for the given block position.
    fn has_block(&self, block: Vector3<i32>) -> bool;

    /// The 2×2×2 neighbourhood starting at `base`, ordered x fastest.
    /// `None` if any neighbour is missing.
    fn read_neighbourhood(&self, base: Vector3<i32>) -> Option<[V; 8]> {
        let mut out = [V::default(); 8];
        for (i, o) in out.iter_mut().enumerate() {
            let d = Vector3::new((i & 1) as i32, ((i >> 1) & 1) as i32, ((i >> 2) & 1) as i32);
            *o = self.read_voxel(base + d)?;
        }
        Some(out)
    }
}
