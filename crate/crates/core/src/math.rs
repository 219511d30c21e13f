//! Camera geometry, rigid transforms and the image container shared by every
//! engine.
//!
//! Poses and camera geometry are kept in `f64`. Depth images and the voxel
//! update path stay in `f32`.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector2, Vector3, Vector6};

use crate::error::GeometryError;

/// Rigid transform `x -> R x + t`.
///
/// Which frames a pose maps between is a property of the call site; the
/// convention in this crate is that `Engine` poses map world to camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Rotation given as an axis-angle vector (radians), then translation.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::new(axis_angle).into_inner(),
            translation,
        }
    }

    /// World-to-camera pose of a camera at `eye` looking at `target`.
    ///
    /// Camera axes follow the usual vision convention: x right, y down,
    /// z forward. `up` is the world direction that should appear upwards in
    /// the image.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self {
            rotation,
            translation: -(rotation * eye),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Homogeneous single-precision matrix, as consumed by the voxel update.
    pub fn to_matrix4_f32(&self) -> Matrix4<f32> {
        let mut m = Matrix4::<f32>::identity();
        for r in 0..3 {
            for c in 0..3 {
                m[(r, c)] = self.rotation[(r, c)] as f32;
            }
            m[(r, 3)] = self.translation[r] as f32;
        }
        m
    }

    /// Frobenius norm of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }

    /// Projects the rotation back onto SO(3) (polar decomposition).
    pub fn reorthonormalized(&self) -> Pose {
        Pose {
            rotation: nearest_rotation(&self.rotation),
            translation: self.translation,
        }
    }

    /// Rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Translation distance and rotation angle (radians) between two poses.
    /// For camera positions compare camera-to-world poses.
    pub fn distance_to(&self, other: &Pose) -> (f64, f64) {
        let delta = self.rotation.transpose() * other.rotation;
        let c = ((delta.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        ((self.translation - other.translation).norm(), c.acos())
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Closest rotation matrix in the Frobenius sense.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Skew-symmetric cross-product matrix `[v]×`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left-multiplies `pose` by the small motion described by `twist`.
///
/// `twist = (ω, v)`: the rotation part is the exponential of `ω`, the
/// translation part is added after rotating, i.e. the result is
/// `x -> R_ω (R x + t) + v`. The rotation is re-orthonormalized so that
/// repeated increments do not drift off SO(3).
pub fn pose_increment(pose: &Pose, twist: &Vector6<f64>) -> Pose {
    let omega = Vector3::new(twist[0], twist[1], twist[2]);
    let v = Vector3::new(twist[3], twist[4], twist[5]);
    let inc = Rotation3::new(omega).into_inner();
    Pose {
        rotation: nearest_rotation(&(inc * pose.rotation)),
        translation: inc * pose.translation + v,
    }
}

/// Pinhole intrinsics of one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics(*self))
        }
    }

    /// Intrinsics of the image after `level` 2×2 reductions.
    ///
    /// Pixel centres are kept consistent: a reduced pixel covers the 2×2
    /// block it averages.
    pub fn downsampled(&self, level: usize) -> Intrinsics {
        let mut out = *self;
        for _ in 0..level {
            out = Intrinsics {
                fx: out.fx * 0.5,
                fy: out.fy * 0.5,
                cx: (out.cx + 0.5) * 0.5 - 0.5,
                cy: (out.cy + 0.5) * 0.5 - 0.5,
                width: out.width.div_ceil(2),
                height: out.height.div_ceil(2),
            };
        }
        out
    }

    /// Camera-frame direction (z = 1) through a pixel.
    #[inline]
    pub fn ray(&self, px: f64, py: f64) -> Vector3<f64> {
        Vector3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0)
    }

    /// `(fx, fy, cx, cy)` in single precision.
    pub fn projection_params(&self) -> nalgebra::Vector4<f32> {
        nalgebra::Vector4::new(self.fx as f32, self.fy as f32, self.cx as f32, self.cy as f32)
    }
}

/// Perspective projection. The caller must ensure `p_cam.z > 0`.
#[inline]
pub fn project(intr: &Intrinsics, p_cam: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(
        intr.fx * p_cam.x / p_cam.z + intr.cx,
        intr.fy * p_cam.y / p_cam.z + intr.cy,
    )
}

/// Back-projection of a pixel at the given z-depth. The caller must ensure
/// `depth > 0`.
#[inline]
pub fn unproject(intr: &Intrinsics, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
    Vector3::new(
        (pixel.x - intr.cx) / intr.fx * depth,
        (pixel.y - intr.cy) / intr.fy * depth,
        depth,
    )
}

/// Row-major image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Image2D<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }
}

impl<T> Image2D<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self, GeometryError> {
        if data.len() != width * height {
            return Err(GeometryError::ImageSize {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn rows(&self) -> std::slice::Chunks<'_, T> {
        self.data.chunks(self.width.max(1))
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Image2D<U> {
        Image2D {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

/// 8-bit RGB pixel.
pub type Rgb = [u8; 3];
