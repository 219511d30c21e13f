//! Pose refinement by aligning depth points with the zero level of the SDF.
//!
//! Each point contributes `E(σ·V(p))` with
//! `E(x) = -4eˣ / (eˣ + 1)²`, minimal (−1) on the surface and flat far away.

use nalgebra::{Vector2, Vector3, Vector6};

use super::{apply_increment, reduce, NormalEquations, TrackResult, TrackerSettings};
use crate::error::TrackingError;
use crate::index::VolumeRead;
use crate::math::{unproject, Image2D, Intrinsics, Pose};
use crate::raycast::trilinear_sdf_grad;
use crate::voxel::Voxel;

#[inline]
pub fn ren_cost(x: f64) -> f64 {
    // symmetric in x; evaluate with a non-positive exponent
    let e = (-x.abs()).exp();
    -4.0 * e / ((e + 1.0) * (e + 1.0))
}

/// `dE/dx = 4eˣ(eˣ − 1) / (eˣ + 1)³`.
#[inline]
pub fn ren_cost_derivative(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    let d = 4.0 * e * (1.0 - e) / ((e + 1.0) * (e + 1.0) * (e + 1.0));
    if x < 0.0 {
        -d
    } else {
        d
    }
}

/// IRLS weight `E'(x)/x`, continuous at 0.
#[inline]
fn ren_weight(x: f64) -> f64 {
    if x.abs() < 1e-6 {
        0.5
    } else {
        ren_cost_derivative(x) / x
    }
}

/// Cost, gradient and weighted Gauss-Newton matrix over camera-frame
/// points. Points outside the allocated volume are skipped.
pub fn ren_evaluate<V: Voxel, R: VolumeRead<V> + ?Sized>(
    volume: &R,
    points: &[Vector3<f64>],
    cam_to_world: &Pose,
    sigma: f64,
) -> NormalEquations {
    let c = cam_to_world.translation;
    reduce(points, |q, eq| {
        let p = cam_to_world.transform_point(q);
        let Some((v, grad)) = trilinear_sdf_grad(volume, &p) else {
            return;
        };
        let x = sigma * v;
        let a = (p - c).cross(&grad);
        let j = Vector6::new(a.x, a.y, a.z, grad.x, grad.y, grad.z) * sigma;
        eq.add(&j, ren_cost_derivative(x), ren_weight(x), ren_cost(x));
    })
}

fn valid_points(depth: &Image2D<f32>, intr: &Intrinsics) -> Vec<Vector3<f64>> {
    let w = depth.width();
    depth
        .data()
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > 0.0)
        .map(|(i, &d)| unproject(intr, &Vector2::new((i % w) as f64, (i / w) as f64), d as f64))
        .collect()
}

/// Refines a world-to-camera pose against the volume.
pub fn ren_refine<V: Voxel, R: VolumeRead<V> + ?Sized>(
    volume: &R,
    depth: &Image2D<f32>,
    intr: &Intrinsics,
    initial_pose: &Pose,
    settings: &TrackerSettings,
) -> Result<TrackResult, TrackingError> {
    let points = valid_points(depth, intr);
    let mut t = initial_pose.inverse();
    let mut eq = ren_evaluate(volume, &points, &t, settings.ren_sigma);
    let mut iterations = 0;
    for _ in 0..settings.max_iterations {
        if eq.count < settings.min_pairs {
            return Err(TrackingError::InsufficientPairs {
                found: eq.count,
                needed: settings.min_pairs,
            });
        }
        iterations += 1;
        // gradient descent direction on the IRLS system; sign folded in solve
        let mut step = eq.solve(false, 0.0, settings.max_condition)?;
        let mut accepted = None;
        for _ in 0..8 {
            let candidate = apply_increment(&t, &step);
            let next = ren_evaluate(volume, &points, &candidate, settings.ren_sigma);
            if next.cost < eq.cost {
                accepted = Some((candidate, next));
                break;
            }
            step *= 0.5;
        }
        let Some((candidate, next)) = accepted else { break };
        t = candidate;
        eq = next;
        if step.norm() < settings.convergence_epsilon {
            break;
        }
    }
    Ok(TrackResult {
        pose: t.inverse(),
        iterations,
        pairs: eq.count,
        rms: if eq.count > 0 { (-eq.cost / eq.count as f64).max(0.0) } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{DenseConfig, DenseVolume};
    use crate::voxel::VoxelF;

    #[test]
    fn cost_shape() {
        assert_eq!(ren_cost(0.0), -1.0);
        assert!((ren_cost(2.0) - ren_cost(-2.0)).abs() < 1e-15);
        assert!(ren_cost(30.0) > -1e-11);
        let h = 1e-6;
        for x in [-3.0, -0.7, -0.01, 0.2, 1.5, 4.0] {
            let fd = (ren_cost(x + h) - ren_cost(x - h)) / (2.0 * h);
            assert!((fd - ren_cost_derivative(x)).abs() < 1e-8, "{x}");
            // closed form with the unsimplified exponentials
            let e = f64::exp(x);
            let closed = 4.0 * e * (e - 1.0) / (e + 1.0).powi(3);
            assert!((closed - ren_cost_derivative(x)).abs() < 1e-12);
        }
        assert!((ren_weight(1e-9) - 0.5).abs() < 1e-9);
        assert!((ren_weight(1e-3) - 0.5).abs() < 1e-5);
    }

    /// Dense volume holding the exact signed distance to a sphere.
    fn sphere_volume() -> DenseVolume<VoxelF> {
        let vs = 0.02f32;
        let config = DenseConfig {
            size: nalgebra::Vector3::new(64, 64, 64),
            offset: nalgebra::Vector3::new(-32, -32, 32),
        };
        let mut vol = DenseVolume::<VoxelF>::new(config, vs);
        let centre = Vector3::new(0.0, 0.0, 1.3);
        for i in 0..config.voxel_count() {
            let v = config.voxel_of(i);
            let p = (v.cast::<f64>() + Vector3::repeat(0.5)) * vs as f64;
            let d = ((p - centre).norm() - 0.3) as f32;
            let vox = &mut vol.voxels_mut()[i];
            vox.sdf = (d / 0.1).clamp(-1.0, 1.0);
            vox.w_depth = 1;
        }
        vol
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let vol = sphere_volume();
        let t = Pose::from_axis_angle(Vector3::new(0.01, 0.02, 0.0), Vector3::new(0.01, 0.0, 0.0));
        let points: Vec<_> = (0..40)
            .map(|i| {
                let a = i as f64 * 0.37;
                Vector3::new(0.2 * a.sin(), 0.2 * a.cos(), 1.05 + 0.01 * (i % 3) as f64)
            })
            .collect();
        let eq = ren_evaluate(&vol, &points, &t, 10.0);
        assert_eq!(eq.count, points.len());
        let h = 1e-7;
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            let plus = ren_evaluate(&vol, &points, &apply_increment(&t, &d), 10.0).cost;
            d[k] = -h;
            let minus = ren_evaluate(&vol, &points, &apply_increment(&t, &d), 10.0).cost;
            let fd = (plus - minus) / (2.0 * h);
            assert!((fd - eq.g[k]).abs() < 1e-4 * (1.0 + fd.abs()), "component {k}: {fd} vs {}", eq.g[k]);
        }
    }
}
