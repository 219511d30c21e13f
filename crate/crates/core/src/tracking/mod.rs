//! Camera tracking: point-to-plane ICP against raycast maps, photometric
//! alignment against raycast colours, and SDF-based refinement.
//!
//! All optimizers work on the camera-to-world pose `T = (R, c)` and apply
//! increments `(ω, v)` about the camera centre:
//! `T ← (exp(ω)·R, c + v)`. Rotation-only levels therefore never touch the
//! camera position. Sums over pixels are computed in fixed-size chunks in
//! parallel and reduced in chunk order, so results do not depend on
//! scheduling.

mod color;
mod icp;
pub mod pyramid;
mod ren;

pub use color::{color_residual_and_jacobian, color_track, ColorTrackInput};
pub use icp::{associate, icp_jacobian, icp_level, icp_track, point_to_plane_residual, IcpPair};
pub use ren::{ren_cost, ren_cost_derivative, ren_evaluate, ren_refine};

use nalgebra::{Matrix3, Matrix6, Rotation3, Vector3, Vector6};

use crate::error::TrackingError;
use crate::math::{nearest_rotation, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackerType {
    /// Photometric alignment of raycast colours.
    Color,
    /// Point-to-plane ICP on every level.
    Icp,
    /// ICP on the coarse levels, SDF refinement on the finest.
    IcpRen,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerSettings {
    pub tracker_type: TrackerType,
    pub num_hierarchy_levels: usize,
    /// Coarsest levels that solve for rotation only.
    pub num_rotation_only_levels: usize,
    /// Correspondences further apart than this many metres are outliers on
    /// the coarsest level; the gate shrinks linearly towards the finest.
    pub icp_distance_threshold: f64,
    /// Colour tracker: use every other point.
    pub skip_points: bool,
    pub ren_sigma: f64,
    pub max_iterations: usize,
    /// Stop a level once the increment norm falls below this.
    pub convergence_epsilon: f64,
    /// Fewer valid correspondences than this is a failure.
    pub min_pairs: usize,
    /// Condition number above which the normal equations count as singular.
    pub max_condition: f64,
    /// ICP takes its normals from neighbouring points of the reference map
    /// instead of the SDF gradient. Gradient normals of a thin projective
    /// TSDF lean towards the camera at grazing angles, which biases the
    /// point-to-plane solution.
    pub point_map_normals: bool,
}

impl Default for TrackerSettings {
    fn default() -> Self {
        Self {
            tracker_type: TrackerType::Icp,
            num_hierarchy_levels: 5,
            num_rotation_only_levels: 2,
            icp_distance_threshold: 0.1,
            skip_points: true,
            ren_sigma: 10.0,
            max_iterations: 20,
            convergence_epsilon: 1e-5,
            min_pairs: 60,
            max_condition: 1e8,
            point_map_normals: true,
        }
    }
}

impl TrackerSettings {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_hierarchy_levels == 0 {
            return Err("at least one hierarchy level is required".into());
        }
        if self.num_rotation_only_levels > self.num_hierarchy_levels {
            return Err("more rotation-only levels than hierarchy levels".into());
        }
        if self.icp_distance_threshold <= 0.0 || self.ren_sigma <= 0.0 || self.max_iterations == 0 {
            return Err("tracker thresholds must be positive".into());
        }
        Ok(())
    }

    /// Outlier gate on `level`: the full threshold on the coarsest level,
    /// `threshold / levels` on level 0.
    pub fn icp_threshold(&self, level: usize) -> f64 {
        let n = self.num_hierarchy_levels as f64;
        self.icp_distance_threshold * (level.min(self.num_hierarchy_levels - 1) as f64 + 1.0) / n
    }

    pub fn is_rotation_only(&self, level: usize) -> bool {
        level + self.num_rotation_only_levels >= self.num_hierarchy_levels
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackResult {
    /// World to camera.
    pub pose: Pose,
    pub iterations: usize,
    /// Correspondences (or terms) used in the last evaluation.
    pub pairs: usize,
    /// Root mean square residual of the last evaluation.
    pub rms: f64,
}

/// Applies a camera-centred increment to a camera-to-world pose.
pub fn apply_increment(cam_to_world: &Pose, delta: &Vector6<f64>) -> Pose {
    let omega = Vector3::new(delta[0], delta[1], delta[2]);
    let v = Vector3::new(delta[3], delta[4], delta[5]);
    let rotation: Matrix3<f64> = if omega == Vector3::zeros() {
        cam_to_world.rotation
    } else {
        nearest_rotation(&(Rotation3::new(omega).into_inner() * cam_to_world.rotation))
    };
    Pose {
        rotation,
        translation: if v == Vector3::zeros() {
            cam_to_world.translation
        } else {
            cam_to_world.translation + v
        },
    }
}

/// Weighted least-squares accumulator `H = Σ w JJᵀ`, `g = Σ J r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalEquations {
    pub h: Matrix6<f64>,
    pub g: Vector6<f64>,
    pub cost: f64,
    pub count: usize,
}

impl Default for NormalEquations {
    fn default() -> Self {
        Self {
            h: Matrix6::zeros(),
            g: Vector6::zeros(),
            cost: 0.0,
            count: 0,
        }
    }
}

impl NormalEquations {
    #[inline]
    pub fn add(&mut self, j: &Vector6<f64>, r: f64, weight: f64, cost: f64) {
        self.h += (j * j.transpose()) * weight;
        self.g += j * r;
        self.cost += cost;
        self.count += 1;
    }

    pub fn merge(&mut self, other: &NormalEquations) {
        self.h += other.h;
        self.g += other.g;
        self.cost += other.cost;
        self.count += other.count;
    }

    /// Solves `H δ = −g`, or the 3×3 rotation block only. `damping` adds
    /// `λ·diag(H)`.
    pub fn solve(&self, rotation_only: bool, damping: f64, max_condition: f64) -> Result<Vector6<f64>, TrackingError> {
        let mut h = self.h;
        for i in 0..6 {
            h[(i, i)] *= 1.0 + damping;
        }
        if rotation_only {
            let h3 = h.fixed_view::<3, 3>(0, 0).into_owned();
            let g3 = self.g.fixed_rows::<3>(0).into_owned();
            check_condition(&h3.symmetric_eigenvalues().iter().copied().collect::<Vec<_>>(), max_condition)?;
            let x = h3.cholesky().ok_or(TrackingError::Singular(f64::INFINITY))?.solve(&(-g3));
            Ok(Vector6::new(x[0], x[1], x[2], 0.0, 0.0, 0.0))
        } else {
            check_condition(&h.symmetric_eigenvalues().iter().copied().collect::<Vec<_>>(), max_condition)?;
            Ok(h.cholesky().ok_or(TrackingError::Singular(f64::INFINITY))?.solve(&(-self.g)))
        }
    }
}

fn check_condition(eigenvalues: &[f64], max_condition: f64) -> Result<(), TrackingError> {
    let max = eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) || !max.is_finite() {
        return Err(TrackingError::Singular(f64::INFINITY));
    }
    let cond = max / min;
    if cond > max_condition {
        return Err(TrackingError::Singular(cond));
    }
    Ok(())
}

/// Items per chunk in parallel reductions.
pub(crate) const CHUNK: usize = 2048;

/// Sums per-item contributions in parallel chunks, reduced in order.
pub(crate) fn reduce<T: Sync>(items: &[T], f: impl Fn(&T, &mut NormalEquations) + Sync) -> NormalEquations {
    use rayon::prelude::*;
    let partial: Vec<NormalEquations> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut eq = NormalEquations::default();
            for item in chunk {
                f(item, &mut eq);
            }
            eq
        })
        .collect();
    let mut total = NormalEquations::default();
    for p in &partial {
        total.merge(p);
    }
    total
}
