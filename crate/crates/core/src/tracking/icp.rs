//! Point-to-plane ICP against raycast point and normal maps.

use nalgebra::{Vector2, Vector3, Vector4, Vector6};
use rayon::prelude::*;

use super::{apply_increment, reduce, NormalEquations, TrackResult, TrackerSettings};
use crate::error::TrackingError;
use crate::math::{project, unproject, Image2D, Intrinsics, Pose};
use crate::raycast::RaycastMaps;

/// A depth point matched to a reference surface point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpPair {
    /// Depth point in the live camera frame.
    pub q_cam: Vector3<f64>,
    /// Reference point and unit normal, world frame.
    pub v: Vector3<f64>,
    pub n: Vector3<f64>,
}

#[inline]
pub fn point_to_plane_residual(q_world: &Vector3<f64>, v: &Vector3<f64>, n: &Vector3<f64>) -> f64 {
    (q_world - v).dot(n)
}

/// Derivative of the residual with respect to a camera-centred increment
/// `(ω, v)` applied at camera centre `c`.
#[inline]
pub fn icp_jacobian(q_world: &Vector3<f64>, c: &Vector3<f64>, n: &Vector3<f64>) -> Vector6<f64> {
    let a = (q_world - c).cross(n);
    Vector6::new(a.x, a.y, a.z, n.x, n.y, n.z)
}

/// Normals from the cross product of neighbouring surface points, oriented
/// like the gradient normals in `maps`. Pixels on the image border or next
/// to an invalid point get no normal.
pub fn point_map_normals(maps: &RaycastMaps) -> Image2D<Vector4<f32>> {
    let (w, h) = (maps.points.width(), maps.points.height());
    let pt = |x: usize, y: usize| {
        let p = maps.points.get(x, y);
        (p.w > 0.0).then(|| Vector3::new(p.x as f64, p.y as f64, p.z as f64))
    };
    let rows: Vec<Vec<Vector4<f32>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let g = maps.normals.get(x, y);
                    if g.w <= 0.0 || x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                        return Vector4::zeros();
                    }
                    let (Some(l), Some(r), Some(u), Some(d)) = (pt(x - 1, y), pt(x + 1, y), pt(x, y - 1), pt(x, y + 1)) else {
                        return Vector4::zeros();
                    };
                    let n = (d - u).cross(&(r - l));
                    let len = n.norm();
                    if !(len > 1e-12) {
                        return Vector4::zeros();
                    }
                    let mut n = n / len;
                    if n.dot(&Vector3::new(g.x as f64, g.y as f64, g.z as f64)) < 0.0 {
                        n = -n;
                    }
                    Vector4::new(n.x as f32, n.y as f32, n.z as f32, 1.0)
                })
                .collect()
        })
        .collect();
    Image2D::from_vec(w, h, rows.concat()).expect("same size as the point map")
}

/// Projective association of a depth image (at intrinsics `intr`) into the
/// reference maps. Pairs whose points are more than `threshold` apart are
/// dropped. Pairs come out in pixel order.
pub fn associate(depth: &Image2D<f32>, intr: &Intrinsics, maps: &RaycastMaps, cam_to_world: &Pose, threshold: f64) -> Vec<IcpPair> {
    let w = depth.width();
    let (mw, mh) = (maps.points.width() as i64, maps.points.height() as i64);
    let rows: Vec<Vec<IcpPair>> = depth
        .data()
        .par_chunks(w)
        .enumerate()
        .map(|(y, row)| {
            let mut out = Vec::new();
            for (x, &d) in row.iter().enumerate() {
                if !(d > 0.0) {
                    continue;
                }
                let q_cam = unproject(intr, &Vector2::new(x as f64, y as f64), d as f64);
                let q_world = cam_to_world.transform_point(&q_cam);
                let p_ref = maps.pose.transform_point(&q_world);
                if p_ref.z <= 0.0 {
                    continue;
                }
                let pix = project(&maps.intrinsics, &p_ref);
                let (xi, yi) = ((pix.x + 0.5).floor(), (pix.y + 0.5).floor());
                if !(xi >= 0.0 && yi >= 0.0 && (xi as i64) < mw && (yi as i64) < mh) {
                    continue;
                }
                let (xi, yi) = (xi as usize, yi as usize);
                let p = maps.points.get(xi, yi);
                let n = maps.normals.get(xi, yi);
                if p.w <= 0.0 || n.w <= 0.0 {
                    continue;
                }
                let v = Vector3::new(p.x as f64, p.y as f64, p.z as f64);
                let n = Vector3::new(n.x as f64, n.y as f64, n.z as f64);
                // the point distance bounds the residual and also rejects
                // matches across silhouettes, where the plane distance can
                // be small while the points are far apart
                if (q_world - v).norm() > threshold {
                    continue;
                }
                out.push(IcpPair { q_cam, v, n });
            }
            out
        })
        .collect();
    rows.concat()
}

fn accumulate(pairs: &[IcpPair], cam_to_world: &Pose) -> NormalEquations {
    let c = cam_to_world.translation;
    reduce(pairs, |p, eq| {
        let q = cam_to_world.transform_point(&p.q_cam);
        let r = point_to_plane_residual(&q, &p.v, &p.n);
        eq.add(&icp_jacobian(&q, &c, &p.n), r, 1.0, r * r);
    })
}

fn cost(pairs: &[IcpPair], cam_to_world: &Pose) -> f64 {
    let partial: Vec<f64> = pairs
        .par_chunks(super::CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|p| {
                    let r = point_to_plane_residual(&cam_to_world.transform_point(&p.q_cam), &p.v, &p.n);
                    r * r
                })
                .sum()
        })
        .collect();
    partial.iter().sum()
}

/// Result of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelOutcome {
    pub cam_to_world: Pose,
    pub iterations: usize,
    pub pairs: usize,
    pub rms: f64,
}

/// Gauss-Newton on one level, starting from `cam_to_world`. Each iteration
/// re-associates with outlier gate `threshold`, then halves the step until
/// the cost over the current pairs does not increase.
pub fn icp_level(
    depth: &Image2D<f32>,
    intr: &Intrinsics,
    maps: &RaycastMaps,
    cam_to_world: &Pose,
    rotation_only: bool,
    threshold: f64,
    settings: &TrackerSettings,
) -> Result<LevelOutcome, TrackingError> {
    let mut t = *cam_to_world;
    let mut out = LevelOutcome {
        cam_to_world: t,
        iterations: 0,
        pairs: 0,
        rms: 0.0,
    };
    for it in 0..settings.max_iterations {
        let pairs = associate(depth, intr, maps, &t, threshold);
        if pairs.len() < settings.min_pairs {
            return Err(TrackingError::InsufficientPairs {
                found: pairs.len(),
                needed: settings.min_pairs,
            });
        }
        let eq = accumulate(&pairs, &t);
        out.iterations = it + 1;
        out.pairs = pairs.len();
        out.rms = (eq.cost / pairs.len() as f64).sqrt();
        let mut step = eq.solve(rotation_only, 0.0, settings.max_condition)?;
        let mut accepted = None;
        for _ in 0..8 {
            let candidate = apply_increment(&t, &step);
            if cost(&pairs, &candidate) <= eq.cost {
                accepted = Some(candidate);
                break;
            }
            step *= 0.5;
        }
        let Some(candidate) = accepted else { break };
        t = candidate;
        if step.norm() < settings.convergence_epsilon {
            break;
        }
    }
    out.cam_to_world = t;
    Ok(out)
}

/// Coarse-to-fine ICP over `levels` (indices into the depth pyramid, each
/// paired with its intrinsics). A failure on a coarse level skips it; a
/// failure on the last level fails the track. Returns the world-to-camera
/// pose.
pub fn icp_track(
    depth_pyramid: &[(&Image2D<f32>, Intrinsics, usize)],
    maps: &RaycastMaps,
    initial_pose: &Pose,
    settings: &TrackerSettings,
) -> Result<TrackResult, TrackingError> {
    let derived;
    let maps = if settings.point_map_normals {
        derived = RaycastMaps {
            normals: point_map_normals(maps),
            ..maps.clone()
        };
        &derived
    } else {
        maps
    };
    let mut t = initial_pose.inverse();
    let mut iterations = 0;
    let mut last = None;
    for (i, (depth, intr, level)) in depth_pyramid.iter().enumerate() {
        let finest = i + 1 == depth_pyramid.len();
        let threshold = settings.icp_threshold(*level);
        match icp_level(depth, intr, maps, &t, settings.is_rotation_only(*level), threshold, settings) {
            Ok(o) => {
                t = o.cam_to_world;
                iterations += o.iterations;
                last = Some(o);
            }
            Err(e) if finest => return Err(e),
            Err(e) => log::debug!("skipping level {level}: {e}"),
        }
    }
    let last = last.ok_or(TrackingError::NoReference)?;
    Ok(TrackResult {
        pose: t.inverse(),
        iterations,
        pairs: last.pairs,
        rms: last.rms,
    })
}
