//! Photometric tracking: the live RGB image is aligned to colours stored
//! in the volume at raycast surface points.

use nalgebra::{Matrix2x3, Matrix3, Matrix3x6, SMatrix, Vector3, Vector6};

use super::pyramid::ImagePyramid;
use super::{apply_increment, reduce, NormalEquations, TrackResult, TrackerSettings};
use crate::error::TrackingError;
use crate::math::{skew, Image2D, Intrinsics, Pose};
use crate::raycast::PointCloud;

pub struct ColorTrackInput<'a> {
    /// World points with their volume colours (0..255).
    pub cloud: &'a PointCloud,
    /// Live RGB image pyramid (0..255 per channel).
    pub rgb: &'a ImagePyramid<Vector3<f32>>,
    /// Full-resolution RGB intrinsics.
    pub rgb_intrinsics: Intrinsics,
    /// Depth camera to RGB camera.
    pub depth_to_rgb: Pose,
}

/// Bilinear sample and its pixel-space derivative. `None` unless all four
/// neighbours exist.
fn sample(image: &Image2D<Vector3<f32>>, x: f64, y: f64) -> Option<(Vector3<f64>, Vector3<f64>, Vector3<f64>)> {
    if !(x >= 0.0 && y >= 0.0) {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    if x0 + 1 >= image.width() || y0 + 1 >= image.height() {
        return None;
    }
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let c = |dx: usize, dy: usize| image.get(x0 + dx, y0 + dy).cast::<f64>();
    let (c00, c10, c01, c11) = (c(0, 0), c(1, 0), c(0, 1), c(1, 1));
    let top = c00 + (c10 - c00) * fx;
    let bottom = c01 + (c11 - c01) * fx;
    let value = top + (bottom - top) * fy;
    let ddx = (c10 - c00) * (1.0 - fy) + (c11 - c01) * fy;
    let ddy = bottom - top;
    Some((value, ddx, ddy))
}

/// RGB residual `I(π(M·P)) − C` of one point and its 3×6 Jacobian with
/// respect to a camera-centred increment of the depth camera pose.
pub fn color_residual_and_jacobian(
    image: &Image2D<Vector3<f32>>,
    intr: &Intrinsics,
    depth_to_rgb: &Pose,
    cam_to_world: &Pose,
    point: &Vector3<f64>,
    color: &Vector3<f64>,
) -> Option<(Vector3<f64>, SMatrix<f64, 3, 6>)> {
    let y = point - cam_to_world.translation;
    let rt = cam_to_world.rotation.transpose();
    let p_depth = rt * y;
    let p = depth_to_rgb.transform_point(&p_depth);
    if p.z <= 1e-6 {
        return None;
    }
    let (u, v) = (intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy);
    let (value, ddx, ddy) = sample(image, u, v)?;
    let inv_z = 1.0 / p.z;
    let d_proj = Matrix2x3::new(
        intr.fx * inv_z,
        0.0,
        -intr.fx * p.x * inv_z * inv_z,
        0.0,
        intr.fy * inv_z,
        -intr.fy * p.y * inv_z * inv_z,
    );
    let mut d_pdepth = Matrix3x6::zeros();
    d_pdepth.fixed_view_mut::<3, 3>(0, 0).copy_from(&(rt * skew(&y)));
    d_pdepth.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rt));
    let d_pix = d_proj * (depth_to_rgb.rotation * d_pdepth);
    let d_img = Matrix3::from_columns(&[ddx, ddy, Vector3::zeros()]).fixed_columns::<2>(0).into_owned();
    Some((value - color, d_img * d_pix))
}

fn evaluate(
    image: &Image2D<Vector3<f32>>,
    intr: &Intrinsics,
    input: &ColorTrackInput,
    points: &[usize],
    cam_to_world: &Pose,
) -> NormalEquations {
    reduce(points, |&i, eq| {
        let p = input.cloud.points[i].cast::<f64>();
        let c = input.cloud.colors[i].cast::<f64>();
        let Some((r, j)) = color_residual_and_jacobian(image, intr, &input.depth_to_rgb, cam_to_world, &p, &c) else {
            return;
        };
        for k in 0..3 {
            let row: Vector6<f64> = j.row(k).transpose();
            // one count per point, not per channel
            eq.add(&row, r[k], 1.0, r[k] * r[k]);
            eq.count -= 1;
        }
        eq.count += 1;
    })
}

fn mean_cost(eq: &NormalEquations) -> f64 {
    if eq.count == 0 {
        f64::INFINITY
    } else {
        eq.cost / eq.count as f64
    }
}

/// Levenberg-Marquardt over the RGB pyramid, coarse to fine. Returns the
/// world-to-depth-camera pose.
pub fn color_track(input: &ColorTrackInput, initial_pose: &Pose, settings: &TrackerSettings) -> Result<TrackResult, TrackingError> {
    if input.cloud.is_empty() {
        return Err(TrackingError::InsufficientPairs {
            found: 0,
            needed: settings.min_pairs,
        });
    }
    let stride = if settings.skip_points { 2 } else { 1 };
    let points: Vec<usize> = (0..input.cloud.len()).step_by(stride).collect();
    let mut t = initial_pose.inverse();
    let mut iterations = 0;
    let mut last = NormalEquations::default();
    let levels = settings.num_hierarchy_levels.min(input.rgb.len());
    for level in (0..levels).rev() {
        let image = input.rgb.level(level);
        let intr = input.rgb_intrinsics.downsampled(level);
        let mut eq = evaluate(image, &intr, input, &points, &t);
        let mut lambda = 1e-3;
        for _ in 0..settings.max_iterations {
            if eq.count < settings.min_pairs {
                break;
            }
            iterations += 1;
            let step = match eq.solve(false, lambda, settings.max_condition) {
                Ok(s) => s,
                Err(_) => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let candidate = apply_increment(&t, &step);
            let next = evaluate(image, &intr, input, &points, &candidate);
            if mean_cost(&next) < mean_cost(&eq) {
                t = candidate;
                eq = next;
                lambda = (lambda / 10.0).max(1e-9);
                if step.norm() < settings.convergence_epsilon {
                    break;
                }
            } else {
                lambda *= 10.0;
                if lambda > 1e8 {
                    break;
                }
            }
        }
        last = eq;
    }
    if last.count < settings.min_pairs {
        return Err(TrackingError::InsufficientPairs {
            found: last.count,
            needed: settings.min_pairs,
        });
    }
    Ok(TrackResult {
        pose: t.inverse(),
        iterations,
        pairs: last.count,
        rms: mean_cost(&last).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracking::pyramid::build_color_pyramid;

    fn texture(x: f64, y: f64) -> [u8; 3] {
        let a = 127.0 + 100.0 * (x * 0.21).sin() * (y * 0.17).cos();
        let b = 127.0 + 90.0 * (x * 0.11 + y * 0.07).sin();
        let c = 127.0 + 80.0 * (y * 0.23).sin();
        [a as u8, b as u8, c as u8]
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let intr = Intrinsics::new(80.0, 80.0, 39.5, 29.5, 80, 60).unwrap();
        let image = Image2D::from_fn(80, 60, |x, y| {
            let c = texture(x as f64, y as f64);
            Vector3::new(c[0] as f32, c[1] as f32, c[2] as f32)
        });
        let extr = Pose::from_axis_angle(Vector3::new(0.0, 0.01, 0.0), Vector3::new(0.025, 0.0, 0.0));
        let t = Pose::from_axis_angle(Vector3::new(0.02, -0.01, 0.03), Vector3::new(0.05, 0.02, -0.1));
        let point = t.transform_point(&Vector3::new(0.1, -0.05, 1.2));
        let color = Vector3::new(100.0, 120.0, 80.0);
        let (_, j) = color_residual_and_jacobian(&image, &intr, &extr, &t, &point, &color).unwrap();
        let h = 1e-7;
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            let (rp, _) = color_residual_and_jacobian(&image, &intr, &extr, &apply_increment(&t, &d), &point, &color).unwrap();
            d[k] = -h;
            let (rm, _) = color_residual_and_jacobian(&image, &intr, &extr, &apply_increment(&t, &d), &point, &color).unwrap();
            let fd = (rp - rm) / (2.0 * h);
            for c in 0..3 {
                assert!((fd[c] - j[(c, k)]).abs() < 1e-3 * (1.0 + fd[c].abs()), "({c},{k}): {} vs {}", fd[c], j[(c, k)]);
            }
        }
    }

    #[test]
    fn recovers_small_offset() {
        // points on a textured plane at z = 1.5, coloured by their true projection
        let intr = Intrinsics::new(120.0, 120.0, 79.5, 59.5, 160, 120).unwrap();
        let truth = Pose::identity();
        let rgb = Image2D::from_fn(160, 120, |x, y| texture(x as f64, y as f64));
        let mut cloud = PointCloud::default();
        for y in (4..116).step_by(2) {
            for x in (4..156).step_by(2) {
                let p = intr.ray(x as f64, y as f64) * 1.5;
                let c = texture(x as f64, y as f64);
                cloud.points.push(p.cast::<f32>());
                cloud.colors.push(Vector3::new(c[0] as f32, c[1] as f32, c[2] as f32));
            }
        }
        let pyramid = build_color_pyramid(&rgb, 3);
        let input = ColorTrackInput {
            cloud: &cloud,
            rgb: &pyramid,
            rgb_intrinsics: intr,
            depth_to_rgb: Pose::identity(),
        };
        let settings = TrackerSettings {
            num_hierarchy_levels: 3,
            skip_points: false,
            ..Default::default()
        };
        let start = Pose::from_axis_angle(Vector3::new(0.0, 0.0, 0.01), Vector3::new(0.01, -0.008, 0.0));
        let r = color_track(&input, &start, &settings).unwrap();
        let (dt0, dr0) = start.distance_to(&truth);
        let (dt, dr) = r.pose.distance_to(&truth);
        assert!(dt < dt0 * 0.3 && dr < dr0 * 0.3, "{dt0} {dr0} -> {dt} {dr}");
    }

    #[test]
    fn empty_cloud_fails() {
        let pyramid = build_color_pyramid(&Image2D::new(8, 8, [0u8; 3]), 1);
        let cloud = PointCloud::default();
        let input = ColorTrackInput {
            cloud: &cloud,
            rgb: &pyramid,
            rgb_intrinsics: Intrinsics::new(8.0, 8.0, 3.5, 3.5, 8, 8).unwrap(),
            depth_to_rgb: Pose::identity(),
        };
        assert!(color_track(&input, &Pose::identity(), &TrackerSettings::default()).is_err());
    }
}
