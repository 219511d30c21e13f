//! Dense voxel array of fixed size.

use nalgebra::Vector3;

use super::{VolumeRead, BLOCK_SIDE};
use crate::voxel::Voxel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseConfig {
    /// Size in voxels.
    pub size: Vector3<i32>,
    /// Voxel coordinate of the lower corner.
    pub offset: Vector3<i32>,
}

impl Default for DenseConfig {
    fn default() -> Self {
        Self {
            size: Vector3::new(512, 512, 512),
            offset: Vector3::new(-256, -256, 0),
        }
    }
}

impl DenseConfig {
    pub fn voxel_count(&self) -> usize {
        self.size.x as usize * self.size.y as usize * self.size.z as usize
    }

    /// The whole array counts as a single block.
    pub fn num_voxel_blocks(&self) -> usize {
        1
    }

    pub fn voxel_block_size(&self) -> usize {
        self.voxel_count()
    }

    /// Row-major linear offset of `point`, `None` outside the volume.
    #[inline]
    pub fn linear_index(&self, point: Vector3<i32>) -> Option<usize> {
        let p = point - self.offset;
        if p.x < 0 || p.y < 0 || p.z < 0 || p.x >= self.size.x || p.y >= self.size.y || p.z >= self.size.z {
            return None;
        }
        Some(p.x as usize + self.size.x as usize * (p.y as usize + self.size.y as usize * p.z as usize))
    }

    /// Voxel coordinate of a linear offset.
    #[inline]
    pub fn voxel_of(&self, index: usize) -> Vector3<i32> {
        let sx = self.size.x as usize;
        let sy = self.size.y as usize;
        Vector3::new((index % sx) as i32, ((index / sx) % sy) as i32, (index / (sx * sy)) as i32) + self.offset
    }

    pub fn contains(&self, point: Vector3<i32>) -> bool {
        self.linear_index(point).is_some()
    }
}

#[derive(Debug, Clone)]
pub struct DenseVolume<V> {
    config: DenseConfig,
    voxel_size: f32,
    voxels: Vec<V>,
}

impl<V: Voxel> DenseVolume<V> {
    pub fn new(config: DenseConfig, voxel_size: f32) -> Self {
        Self {
            config,
            voxel_size,
            voxels: vec![V::default(); config.voxel_count()],
        }
    }

    pub fn config(&self) -> &DenseConfig {
        &self.config
    }

    pub fn voxels(&self) -> &[V] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [V] {
        &mut self.voxels
    }

    pub fn voxel_mut(&mut self, point: Vector3<i32>) -> Option<&mut V> {
        let i = self.config.linear_index(point)?;
        Some(&mut self.voxels[i])
    }
}

impl<V: Voxel> VolumeRead<V> for DenseVolume<V> {
    fn voxel_size(&self) -> f32 {
        self.voxel_size
    }

    #[inline]
    fn read_voxel(&self, point: Vector3<i32>) -> Option<V> {
        self.config.linear_index(point).map(|i| self.voxels[i])
    }

    fn has_block(&self, block: Vector3<i32>) -> bool {
        let lo = block * BLOCK_SIDE;
        let hi = lo.add_scalar(BLOCK_SIDE);
        let vlo = self.config.offset;
        let vhi = self.config.offset + self.config.size;
        (0..3).all(|a| lo[a] < vhi[a] && hi[a] > vlo[a])
    }
}
