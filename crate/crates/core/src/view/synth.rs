//! Analytic scenes rendered exactly: z-depth, colour, surface points and
//! normals. Used as ground truth by tests and by the demo sequence.

use nalgebra::{Vector2, Vector3, Vector4};

use super::{Calibration, View};
use crate::math::{Image2D, Intrinsics, Pose, Rgb};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Plane through `point` with unit `normal`. With `half_extent`, only the
    /// rectangle `|u| ≤ hu, |v| ≤ hv` around `point` exists, measured along
    /// the unit axes `u` and `v`.
    Plane {
        point: Vector3<f64>,
        normal: Vector3<f64>,
        half_extent: Option<(Vector3<f64>, f64, Vector3<f64>, f64)>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter; with a `z = 1` camera ray this is the z-depth.
    pub t: f64,
    pub point: Vector3<f64>,
    /// Unit normal facing the ray origin.
    pub normal: Vector3<f64>,
}

impl Shape {
    pub fn sphere(center: Vector3<f64>, radius: f64) -> Self {
        Shape::Sphere { center, radius }
    }

    pub fn infinite_plane(point: Vector3<f64>, normal: Vector3<f64>) -> Self {
        Shape::Plane {
            point,
            normal: normal.normalize(),
            half_extent: None,
        }
    }

    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        match *self {
            Shape::Sphere { center, radius } => {
                let oc = origin - center;
                let a = dir.dot(dir);
                let half_b = dir.dot(&oc);
                let c = oc.dot(&oc) - radius * radius;
                let disc = half_b * half_b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                // numerically stable pair of roots
                let q = if half_b > 0.0 { -half_b - sq } else { -half_b + sq };
                let (mut t0, mut t1) = (q / a, c / q);
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                let t = if t0 > 1e-9 {
                    t0
                } else if t1 > 1e-9 {
                    t1
                } else {
                    return None;
                };
                let point = origin + dir * t;
                let mut normal = (point - center) / radius;
                if normal.dot(dir) > 0.0 {
                    normal = -normal;
                }
                Some(Hit { t, point, normal })
            }
            Shape::Plane {
                point,
                normal,
                half_extent,
            } => {
                let denom = normal.dot(dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = normal.dot(&(point - origin)) / denom;
                if t <= 1e-9 {
                    return None;
                }
                let hit = origin + dir * t;
                if let Some((u, hu, v, hv)) = half_extent {
                    let d = hit - point;
                    if d.dot(&u).abs() > hu || d.dot(&v).abs() > hv {
                        return None;
                    }
                }
                let n = if denom < 0.0 { normal } else { -normal };
                Some(Hit { t, point: hit, normal: n })
            }
        }
    }

    /// Unsigned distance from `p` to the surface.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        match *self {
            Shape::Sphere { center, radius } => ((p - center).norm() - radius).abs(),
            Shape::Plane {
                point,
                normal,
                half_extent,
            } => {
                let d = p - point;
                let h = normal.dot(&d);
                match half_extent {
                    None => h.abs(),
                    Some((u, hu, v, hv)) => {
                        let du = (d.dot(&u).abs() - hu).max(0.0);
                        let dv = (d.dot(&v).abs() - hv).max(0.0);
                        (h * h + du * du + dv * dv).sqrt()
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub shapes: Vec<Shape>,
}

impl Scene {
    pub fn new(shapes: Vec<Shape>) -> Self {
        Self { shapes }
    }

    /// Textured sphere of radius 0.5 m at `(0, 0, 1.5)` resting on a finite
    /// ground patch at `y = 0.5`, ringed by marker spheres of different
    /// sizes that pin down rotation about the vertical axis. World `-y` is
    /// up.
    pub fn demo() -> Self {
        let center = Vector3::new(0.0, 0.0, 1.5);
        let mut shapes = vec![
            Shape::sphere(center, 0.5),
            Shape::Plane {
                point: Vector3::new(0.0, 0.5, 1.5),
                normal: Vector3::new(0.0, -1.0, 0.0),
                half_extent: Some((Vector3::x(), 1.2, Vector3::z(), 1.2)),
            },
        ];
        // (angle, distance from the sphere axis, radius)
        let markers = [
            (0.3, 0.8, 0.12),
            (1.4, 0.9, 0.18),
            (2.3, 0.75, 0.09),
            (3.4, 0.95, 0.15),
            (4.4, 0.8, 0.11),
            (5.4, 0.9, 0.2),
        ];
        for (a, d, r) in markers {
            let c = Vector3::new(center.x + d * f64::sin(a), 0.5 - r, center.z - d * f64::cos(a));
            shapes.push(Shape::sphere(c, r));
        }
        Self::new(shapes)
    }

    pub fn demo_target() -> Vector3<f64> {
        Vector3::new(0.0, 0.0, 1.5)
    }

    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        self.shapes
            .iter()
            .filter_map(|s| s.intersect(origin, dir))
            .min_by(|a, b| a.t.total_cmp(&b.t))
    }

    /// Distance to the nearest surface.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        self.shapes.iter().map(|s| s.distance(p)).fold(f64::INFINITY, f64::min)
    }

    /// Smooth solid texture, a function of the world position only.
    pub fn color_at(p: &Vector3<f64>) -> Rgb {
        let ch = |v: f64| (128.0 + 90.0 * v.sin()).round() as u8;
        [
            ch(9.0 * p.x + 3.0 * p.z),
            ch(8.0 * p.y - 5.0 * p.x + 1.0),
            ch(7.0 * p.z + 4.0 * p.y + 2.0),
        ]
    }

    /// Nearest hit of the ray through pixel `(px, py)` of a camera with the
    /// given world-to-camera pose.
    pub fn cast(&self, pose: &Pose, intr: &Intrinsics, px: f64, py: f64) -> Option<Hit> {
        let origin = pose.inverse().translation;
        let dir = pose.rotation.transpose() * intr.ray(px, py);
        self.intersect(&origin, &dir)
    }
}

fn pixels(intr: &Intrinsics) -> (usize, usize) {
    (intr.width as usize, intr.height as usize)
}

/// Exact z-depth image; background pixels are `0.0`.
pub fn render_depth(scene: &Scene, pose: &Pose, intr: &Intrinsics) -> Image2D<f32> {
    let (w, h) = pixels(intr);
    Image2D::from_fn(w, h, |x, y| {
        scene
            .cast(pose, intr, x as f64, y as f64)
            .map_or(0.0, |hit| hit.t as f32)
    })
}

pub fn render_rgb(scene: &Scene, pose: &Pose, intr: &Intrinsics) -> Image2D<Rgb> {
    let (w, h) = pixels(intr);
    Image2D::from_fn(w, h, |x, y| {
        scene
            .cast(pose, intr, x as f64, y as f64)
            .map_or([0, 0, 0], |hit| Scene::color_at(&hit.point))
    })
}

/// Depth and colour for a depth-camera pose, honouring the calibration's
/// extrinsic and RGB intrinsics.
pub fn render_view(scene: &Scene, calib: &Calibration, depth_pose: &Pose) -> View {
    let rgb_pose = calib.depth_to_rgb().compose(depth_pose);
    View::new(
        render_depth(scene, depth_pose, &calib.depth),
        Some(render_rgb(scene, &rgb_pose, &calib.rgb)),
    )
}

/// World-space surface points and normals, `w = 1` where the ray hits.
pub fn render_surface_maps(
    scene: &Scene,
    pose: &Pose,
    intr: &Intrinsics,
) -> (Image2D<Vector4<f32>>, Image2D<Vector4<f32>>) {
    let (w, h) = pixels(intr);
    let hits = Image2D::from_fn(w, h, |x, y| scene.cast(pose, intr, x as f64, y as f64));
    let points = hits.map(|h| match h {
        Some(h) => Vector4::new(h.point.x as f32, h.point.y as f32, h.point.z as f32, 1.0),
        None => Vector4::zeros(),
    });
    let normals = hits.map(|h| match h {
        Some(h) => Vector4::new(h.normal.x as f32, h.normal.y as f32, h.normal.z as f32, 1.0),
        None => Vector4::zeros(),
    });
    (points, normals)
}

/// `count` cameras on a horizontal circle of `radius` around `target`,
/// raised by `height` (towards world `-y`), starting at `start` radians and
/// covering `arc` radians in total, all looking at `target`.
pub fn orbit_poses(count: usize, target: Vector3<f64>, radius: f64, height: f64, start: f64, arc: f64) -> Vec<Pose> {
    (0..count)
        .map(|i| {
            let theta = start + arc * i as f64 / count.max(1) as f64;
            let eye = target + Vector3::new(radius * theta.sin(), -height, -radius * theta.cos());
            Pose::look_at(eye, target, Vector3::new(0.0, -1.0, 0.0))
        })
        .collect()
}

/// Pinhole intrinsics with a field of view similar to common RGB-D sensors.
pub fn default_intrinsics(width: u32, height: u32) -> Intrinsics {
    let f = 0.82 * width as f64;
    Intrinsics::new(f, f, width as f64 / 2.0 - 0.5, height as f64 / 2.0 - 0.5, width, height)
        .expect("valid by construction")
}

/// Pixel of `p_world` under `pose`, `None` behind the camera.
pub fn project_world(pose: &Pose, intr: &Intrinsics, p_world: &Vector3<f64>) -> Option<Vector2<f64>> {
    let p = pose.transform_point(p_world);
    (p.z > 0.0).then(|| crate::math::project(intr, &p))
}
