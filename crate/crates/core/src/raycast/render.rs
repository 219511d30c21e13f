//! Point/normal maps and preview images.

use nalgebra::{Vector3, Vector4};
use rayon::prelude::*;

use super::range::RangeImage;
use super::sample::{sdf_normal, trilinear_color};
use super::{cast_ray, CastParams, Ray};
use crate::index::VolumeRead;
use crate::math::{Image2D, Intrinsics, Pose, Rgb};
use crate::voxel::Voxel;

/// Raycast output: world-space surface points and unit normals; `w = 1`
/// marks valid pixels. Also records the camera they were rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct RaycastMaps {
    pub points: Image2D<Vector4<f32>>,
    pub normals: Image2D<Vector4<f32>>,
    /// World to camera.
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

impl RaycastMaps {
    pub fn valid_count(&self) -> usize {
        self.points.data().iter().filter(|p| p.w > 0.0).count()
    }
}

/// Camera ray through a pixel, with the factor converting z-depth to
/// distance along the ray.
#[inline]
pub(crate) fn pixel_ray(cam_to_world: &Pose, intr: &Intrinsics, x: usize, y: usize) -> (Ray, f64) {
    let r = intr.ray(x as f64, y as f64);
    let scale = r.norm();
    (
        Ray {
            origin: cam_to_world.translation,
            dir: cam_to_world.rotation * (r / scale),
        },
        scale,
    )
}

/// Casts one ray per pixel inside the range image's intervals.
pub fn render_maps<V: Voxel, R: VolumeRead<V> + ?Sized>(
    volume: &R,
    pose: &Pose,
    intr: &Intrinsics,
    range: &RangeImage,
    params: &CastParams,
) -> RaycastMaps {
    let (w, h) = (intr.width as usize, intr.height as usize);
    let cam_to_world = pose.inverse();
    let pixels: Vec<(Vector4<f32>, Vector4<f32>)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let invalid = (Vector4::zeros(), Vector4::zeros());
            let Some((zmin, zmax)) = range.get(x, y) else {
                return invalid;
            };
            let (ray, scale) = pixel_ray(&cam_to_world, intr, x, y);
            let Some(hit) = cast_ray(volume, &ray, zmin as f64 * scale, zmax as f64 * scale, params).hit() else {
                return invalid;
            };
            let Some(n) = sdf_normal(volume, &hit.point) else {
                return invalid;
            };
            let p = hit.point;
            (
                Vector4::new(p.x as f32, p.y as f32, p.z as f32, 1.0),
                Vector4::new(n.x as f32, n.y as f32, n.z as f32, 1.0),
            )
        })
        .collect();
    let (points, normals): (Vec<_>, Vec<_>) = pixels.into_iter().unzip();
    RaycastMaps {
        points: Image2D::from_vec(w, h, points).expect("sized"),
        normals: Image2D::from_vec(w, h, normals).expect("sized"),
        pose: *pose,
        intrinsics: *intr,
    }
}

/// Greyscale shading `0.8·|n·a| + 0.2` with `a` the optical axis; invalid
/// pixels are black.
pub fn shade_normals(maps: &RaycastMaps) -> Image2D<Rgb> {
    let axis = maps.pose.rotation.row(2).transpose().map(|c| c as f32);
    maps.normals.map(|n| {
        if n.w <= 0.0 {
            return [0, 0, 0];
        }
        let s = 0.8 * n.xyz().dot(&axis).abs() + 0.2;
        let g = (s * 255.0).round().clamp(0.0, 255.0) as u8;
        [g, g, g]
    })
}

/// Voxel colours at the hit points; invalid pixels are black.
pub fn shade_colors<V: Voxel, R: VolumeRead<V> + ?Sized>(volume: &R, maps: &RaycastMaps) -> Image2D<Rgb> {
    let data: Vec<Rgb> = maps
        .points
        .data()
        .par_iter()
        .map(|p| {
            if p.w <= 0.0 {
                return [0, 0, 0];
            }
            let q = Vector3::new(p.x as f64, p.y as f64, p.z as f64);
            trilinear_color(volume, &q).map_or([0, 0, 0], |c| c.map(|v| v.round().clamp(0.0, 255.0) as u8).into())
        })
        .collect();
    Image2D::from_vec(maps.points.width(), maps.points.height(), data).expect("sized")
}

/// Surface points with their voxel colours.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f32>>,
    pub colors: Vec<Vector3<f32>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Every `stride`-th valid pixel in x and y. For coloured volumes, points
/// whose colour cannot be interpolated are dropped.
pub fn forward_project_points<V: Voxel, R: VolumeRead<V> + ?Sized>(volume: &R, maps: &RaycastMaps, stride: usize) -> PointCloud {
    let mut cloud = PointCloud::default();
    let (w, h) = (maps.points.width(), maps.points.height());
    for y in (0..h).step_by(stride) {
        for x in (0..w).step_by(stride) {
            let p = maps.points.get(x, y);
            if p.w <= 0.0 {
                continue;
            }
            let color = if V::HAS_COLOR {
                let q = Vector3::new(p.x as f64, p.y as f64, p.z as f64);
                match trilinear_color(volume, &q) {
                    Some(c) => c.map(|v| v as f32),
                    None => continue,
                }
            } else {
                Vector3::zeros()
            };
            cloud.points.push(p.xyz());
            cloud.colors.push(color);
        }
    }
    cloud
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps(normals: Vec<Vector4<f32>>) -> RaycastMaps {
        let n = normals.len();
        let intr = Intrinsics::new(10.0, 10.0, n as f64 / 2.0, 0.5, n as u32, 1).unwrap();
        RaycastMaps {
            points: Image2D::from_vec(n, 1, normals.iter().map(|n| Vector4::new(0.0, 0.0, 1.0, n.w)).collect()).unwrap(),
            normals: Image2D::from_vec(n, 1, normals).unwrap(),
            pose: Pose::identity(),
            intrinsics: intr,
        }
    }

    #[test]
    fn invalid_maps_give_black_and_empty() {
        let m = maps(vec![Vector4::zeros(); 4]);
        assert!(shade_normals(&m).data().iter().all(|p| *p == [0, 0, 0]));
        let vol = crate::index::DenseVolume::<crate::voxel::VoxelS>::new(Default::default(), 0.004);
        assert!(forward_project_points(&vol, &m, 4).is_empty());
    }

    #[test]
    fn plane_facing_camera_is_uniform() {
        let m = maps(vec![Vector4::new(0.0, 0.0, -1.0, 1.0); 5]);
        let img = shade_normals(&m);
        assert!(img.data().iter().all(|p| *p == [255, 255, 255]));
        let tilted = maps(vec![Vector4::new(1.0, 0.0, 0.0, 1.0)]);
        assert_eq!(shade_normals(&tilted).data()[0], [51, 51, 51]);
    }
}
