//! Raycasting of the TSDF: a block-aware state machine that skips empty
//! space, an expected-depth range image that bounds each ray, and the
//! rendering of point/normal maps and preview images.

mod range;
mod render;
mod sample;

pub use range::{create_expected_depths, RangeImage, FRAGMENT};
pub use render::{
    forward_project_points, render_maps, shade_normals, shade_colors, RaycastMaps, PointCloud,
};
pub use sample::{nearest_sdf, sdf_normal, trilinear_color, trilinear_sdf, trilinear_sdf_grad};

use nalgebra::Vector3;

use crate::index::{world_to_block, VolumeRead, BLOCK_SIDE};
use crate::voxel::Voxel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RaycastState {
    /// Skipping unallocated space in whole blocks.
    SearchBlockCoarse,
    /// Approaching allocated data in small steps.
    SearchBlockFine,
    /// Inside allocated data, stepping by the SDF value.
    SearchSurface,
    /// Passed the zero crossing.
    BehindSurface,
    /// Entered allocated data from behind a surface.
    WrongSide,
}

/// Ray in world space: `origin + t · dir` with unit `dir`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
}

impl Ray {
    #[inline]
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.dir * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CastParams {
    pub voxel_size: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub point: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CastResult {
    Hit(RayHit),
    Miss,
    WrongSide,
}

impl CastResult {
    pub fn hit(&self) -> Option<RayHit> {
        match self {
            CastResult::Hit(h) => Some(*h),
            _ => None,
        }
    }
}

/// Marches `ray` over `t ∈ [t_min, t_max]` (plus one band width for the
/// surface search) and returns the first zero crossing seen from the front.
pub fn cast_ray<V: Voxel, R: VolumeRead<V> + ?Sized>(volume: &R, ray: &Ray, t_min: f64, t_max: f64, params: &CastParams) -> CastResult {
    cast_ray_traced(volume, ray, t_min, t_max, params, |_, _| {})
}

/// [`cast_ray`] reporting every SDF read as `(t, state)`.
pub fn cast_ray_traced<V: Voxel, R: VolumeRead<V> + ?Sized>(
    volume: &R,
    ray: &Ray,
    t_min: f64,
    t_max: f64,
    params: &CastParams,
    mut on_read: impl FnMut(f64, RaycastState),
) -> CastResult {
    let vs = params.voxel_size;
    let mu = params.mu;
    let block_len = vs * BLOCK_SIDE as f64;
    let fine_step = (0.5 * mu).max(vs);
    let has_block = |p: &Vector3<f64>| volume.has_block(world_to_block(p, vs));

    let mut state = RaycastState::SearchBlockCoarse;
    let mut t = t_min;
    let mut unallocated_run = 0.0;
    // last sample in front of the surface
    let mut front = (t, 1.0);

    loop {
        match state {
            RaycastState::SearchBlockCoarse => {
                if t > t_max {
                    return CastResult::Miss;
                }
                if has_block(&ray.at(t)) {
                    t = (t - block_len).max(t_min);
                    unallocated_run = 0.0;
                    state = RaycastState::SearchBlockFine;
                } else {
                    t += block_len;
                }
            }
            RaycastState::SearchBlockFine => {
                if t > t_max {
                    return CastResult::Miss;
                }
                let p = ray.at(t);
                if !has_block(&p) {
                    unallocated_run += fine_step;
                    if unallocated_run > block_len {
                        state = RaycastState::SearchBlockCoarse;
                    }
                    t += fine_step;
                    continue;
                }
                on_read(t, state);
                let value = trilinear_sdf(volume, &p).or_else(|| nearest_sdf(volume, &p));
                match value {
                    Some(v) if v < 0.0 => {
                        state = RaycastState::WrongSide;
                    }
                    Some(v) => {
                        front = (t, v);
                        state = RaycastState::SearchSurface;
                        t += (v * mu).clamp(vs, mu);
                    }
                    None => t += fine_step,
                }
            }
            RaycastState::SearchSurface => {
                if t > t_max + mu {
                    return CastResult::Miss;
                }
                let p = ray.at(t);
                on_read(t, state);
                let value = trilinear_sdf(volume, &p).or_else(|| nearest_sdf(volume, &p));
                match value {
                    None => {
                        // left allocated data
                        unallocated_run = 0.0;
                        state = RaycastState::SearchBlockFine;
                    }
                    Some(v) if v < 0.0 => {
                        let t_hit = refine_crossing(volume, ray, front, (t, v), &mut |tt| on_read(tt, RaycastState::BehindSurface));
                        return CastResult::Hit(RayHit {
                            t: t_hit,
                            point: ray.at(t_hit),
                        });
                    }
                    Some(v) => {
                        front = (t, v);
                        t += (v * mu).clamp(vs, mu);
                    }
                }
            }
            RaycastState::BehindSurface => unreachable!("crossings are refined on detection"),
            RaycastState::WrongSide => return CastResult::WrongSide,
        }
    }
}

/// Two regula-falsi steps on the bracket `front` (positive) / `behind`
/// (negative), each with a fresh trilinear read, then a final linear
/// interpolation.
fn refine_crossing<V: Voxel, R: VolumeRead<V> + ?Sized>(
    volume: &R,
    ray: &Ray,
    mut front: (f64, f64),
    mut behind: (f64, f64),
    on_read: &mut impl FnMut(f64),
) -> f64 {
    let interp = |a: (f64, f64), b: (f64, f64)| a.0 + a.1 / (a.1 - b.1) * (b.0 - a.0);
    for _ in 0..2 {
        let t = interp(front, behind);
        on_read(t);
        match trilinear_sdf(volume, &ray.at(t)) {
            Some(v) if v < 0.0 => behind = (t, v),
            Some(v) => front = (t, v),
            None => return t,
        }
    }
    interp(front, behind)
}

/// Reference raycaster: fixed steps of half a voxel with trilinear reads.
/// A run of valid samples that starts negative is a back face and ends the
/// search; the first positive-to-negative transition is the hit.
pub fn cast_ray_naive<V: Voxel, R: VolumeRead<V> + ?Sized>(volume: &R, ray: &Ray, t_min: f64, t_max: f64, voxel_size: f64) -> CastResult {
    let step = 0.5 * voxel_size;
    let mut prev: Option<(f64, f64)> = None;
    let mut i = 0u64;
    loop {
        let t = t_min + step * i as f64;
        if t > t_max {
            return CastResult::Miss;
        }
        i += 1;
        match trilinear_sdf(volume, &ray.at(t)) {
            None => prev = None,
            Some(v) => {
                match prev {
                    None if v < 0.0 => return CastResult::WrongSide,
                    Some((tp, vp)) if v < 0.0 => {
                        let th = tp + vp / (vp - v) * (t - tp);
                        return CastResult::Hit(RayHit { t: th, point: ray.at(th) });
                    }
                    _ => {}
                }
                prev = Some((t, v));
            }
        }
    }
}
