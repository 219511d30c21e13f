//! Fusion of a depth (and optionally colour) frame into the TSDF.

use nalgebra::{Matrix4, Vector3, Vector4};
use rayon::prelude::*;

use crate::index::{local_offset, voxel_center, DenseVolume, HashVolume, BLOCK_SIDE, BLOCK_VOXELS};
use crate::math::{Image2D, Intrinsics, Pose, Rgb};
use crate::voxel::Voxel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParams {
    /// Voxel edge length in metres.
    pub voxel_size: f32,
    /// Truncation band in metres.
    pub mu: f32,
    /// Observation count cap.
    pub max_w: u8,
    /// Skip voxels whose weight already reached `max_w`.
    pub stop_integrating_at_max: bool,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            voxel_size: 0.004,
            mu: 0.02,
            max_w: 100,
            stop_integrating_at_max: false,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.voxel_size > 0.0) {
            return Err(format!("voxel size must be positive, got {}", self.voxel_size));
        }
        if !(self.mu >= 2.0 * self.voxel_size) {
            return Err(format!(
                "truncation band {} must be at least two voxels ({})",
                self.mu,
                2.0 * self.voxel_size
            ));
        }
        if self.max_w == 0 {
            return Err("max weight must be at least 1".into());
        }
        Ok(())
    }
}

/// Camera data needed by the update function, in single precision.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedImage<'a, T> {
    pub image: &'a Image2D<T>,
    /// World to camera.
    pub m: Matrix4<f32>,
    /// `(fx, fy, cx, cy)`.
    pub proj: Vector4<f32>,
}

impl<'a, T> ProjectedImage<'a, T> {
    pub fn new(image: &'a Image2D<T>, pose: &Pose, intr: &Intrinsics) -> Self {
        Self {
            image,
            m: pose.to_matrix4_f32(),
            proj: intr.projection_params(),
        }
    }
}

/// Input of one integration pass.
#[derive(Debug, Clone, Copy)]
pub struct IntegrationInput<'a> {
    pub depth: ProjectedImage<'a, f32>,
    pub rgb: Option<ProjectedImage<'a, Rgb>>,
}

/// `M · (p, 1)` summed left to right per row.
#[inline]
fn transform(m: &Matrix4<f32>, p: &Vector3<f32>) -> Vector3<f32> {
    Vector3::new(
        m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)] * p.z + m[(0, 3)],
        m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)] * p.z + m[(1, 3)],
        m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)] * p.z + m[(2, 3)],
    )
}

/// Image position of a world point, or `None` if behind the camera or
/// within one pixel of the border.
#[inline]
fn project_inside<T>(cam: &ProjectedImage<'_, T>, pt_model: &Vector3<f32>) -> Option<(Vector3<f32>, f32, f32)> {
    let pt_camera = transform(&cam.m, pt_model);
    if pt_camera.z <= 0.0 {
        return None;
    }
    let x = cam.proj.x * pt_camera.x / pt_camera.z + cam.proj.z;
    let y = cam.proj.y * pt_camera.y / pt_camera.z + cam.proj.w;
    let (w, h) = (cam.image.width() as i32, cam.image.height() as i32);
    if x < 1.0 || x > (w - 2) as f32 || y < 1.0 || y > (h - 2) as f32 {
        return None;
    }
    Some((pt_camera, x, y))
}

enum DepthUpdate {
    Rejected,
    /// Behind the band; nothing written.
    Behind(f32),
    Updated(f32),
}

#[inline]
fn depth_update<V: Voxel>(voxel: &mut V, pt_model: &Vector3<f32>, cam: &ProjectedImage<'_, f32>, mu: f32, max_w: i32) -> DepthUpdate {
    let Some((pt_camera, x, y)) = project_inside(cam, pt_model) else {
        return DepthUpdate::Rejected;
    };
    let w = cam.image.width();
    let depth_measure = cam.image.data()[(x + 0.5) as i32 as usize + (y + 0.5) as i32 as usize * w];
    if depth_measure <= 0.0 {
        return DepthUpdate::Rejected;
    }

    let eta = depth_measure - pt_camera.z;
    if eta < -mu {
        return DepthUpdate::Behind(eta);
    }

    let old_f = voxel.sdf();
    let old_w = voxel.w_depth() as i32;
    let mut new_f = (eta / mu).min(1.0);
    let mut new_w = 1;

    new_f = old_w as f32 * old_f + new_w as f32 * new_f;
    new_w += old_w;
    new_f /= new_w as f32;
    new_w = new_w.min(max_w);

    voxel.set_sdf(new_f);
    voxel.set_w_depth(new_w as u8);
    DepthUpdate::Updated(eta)
}

/// The per-voxel depth update.
///
/// Returns `-1` when the voxel is behind the camera, projects within one
/// pixel of the image border or hits a missing depth sample; otherwise the
/// signed distance `eta` between the measured depth and the voxel along
/// the optical axis. The voxel is written only when `eta >= -mu`.
#[inline]
pub fn update_voxel_depth<V: Voxel>(
    voxel: &mut V,
    pt_model: &Vector3<f32>,
    cam: &ProjectedImage<'_, f32>,
    mu: f32,
    max_w: i32,
) -> f32 {
    match depth_update(voxel, pt_model, cam, mu, max_w) {
        DepthUpdate::Rejected => -1.0,
        DepthUpdate::Behind(eta) | DepthUpdate::Updated(eta) => eta,
    }
}

/// Bilinear colour sample at a continuous pixel position.
#[inline]
pub fn sample_rgb_bilinear(image: &Image2D<Rgb>, x: f32, y: f32) -> Vector3<f32> {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (xi, yi) = (x0 as usize, y0 as usize);
    let px = |dx: usize, dy: usize| {
        let c = image.get(xi + dx, yi + dy);
        Vector3::new(c[0] as f32, c[1] as f32, c[2] as f32)
    };
    px(0, 0) * ((1.0 - fx) * (1.0 - fy)) + px(1, 0) * (fx * (1.0 - fy)) + px(0, 1) * ((1.0 - fx) * fy) + px(1, 1) * (fx * fy)
}

/// Blends one colour observation into the voxel. The caller gates on
/// `|eta| <= mu`.
#[inline]
pub fn update_voxel_color<V: Voxel>(voxel: &mut V, pt_model: &Vector3<f32>, cam: &ProjectedImage<'_, Rgb>, max_w: i32) {
    let Some((_, x, y)) = project_inside(cam, pt_model) else {
        return;
    };
    let sample = sample_rgb_bilinear(cam.image, x, y);
    let old_w = voxel.w_color() as i32;
    let old = voxel.color();
    let new_w = old_w + 1;
    let mut clr = [0u8; 3];
    for k in 0..3 {
        let v = (old_w as f32 * old[k] as f32 + sample[k]) / new_w as f32;
        clr[k] = v.round().clamp(0.0, 255.0) as u8;
    }
    voxel.set_color(clr);
    voxel.set_w_color(new_w.min(max_w) as u8);
}

/// Full update of one voxel: depth, then colour inside the band.
#[inline]
pub fn integrate_voxel<V: Voxel>(voxel: &mut V, pt_model: &Vector3<f32>, input: &IntegrationInput<'_>, params: &SceneParams) {
    let max_w = params.max_w as i32;
    if params.stop_integrating_at_max && voxel.w_depth() as i32 == max_w {
        return;
    }
    let eta = match depth_update(voxel, pt_model, &input.depth, params.mu, max_w) {
        DepthUpdate::Updated(eta) => eta,
        _ => return,
    };
    if V::HAS_COLOR && eta.abs() <= params.mu {
        if let Some(rgb) = &input.rgb {
            update_voxel_color(voxel, pt_model, rgb, max_w);
        }
    }
}

/// Updates all 512 voxels of each listed visible entry. Blocks are
/// processed in parallel; every voxel has exactly one writer.
pub fn integrate_hash<V: Voxel>(volume: &mut HashVolume<V>, visible: &[usize], input: &IntegrationInput<'_>, params: &SceneParams) {
    if visible.is_empty() {
        return;
    }
    let vs = params.voxel_size;
    let (table, vba) = volume.parts_mut();
    let mut slot_block: Vec<Option<Vector3<i32>>> = vec![None; vba.materialized_blocks()];
    for &entry in visible {
        let e = table.entry(entry);
        if e.is_allocated() {
            slot_block[e.block_state as usize] = Some(e.block_pos() * BLOCK_SIDE);
        }
    }
    vba.raw_mut()
        .par_chunks_mut(BLOCK_VOXELS)
        .zip(slot_block.par_iter())
        .for_each(|(block, base)| {
            let Some(base) = base else { return };
            for (i, voxel) in block.iter_mut().enumerate() {
                let p = voxel_center(base + local_offset(i), vs);
                integrate_voxel(voxel, &p, input, params);
            }
        });
}

/// Updates every voxel of a dense volume, parallel over z slabs.
pub fn integrate_dense<V: Voxel>(volume: &mut DenseVolume<V>, input: &IntegrationInput<'_>, params: &SceneParams) {
    let config = *volume.config();
    let vs = params.voxel_size;
    let slab = (config.size.x * config.size.y) as usize;
    volume.voxels_mut().par_chunks_mut(slab).enumerate().for_each(|(z, voxels)| {
        let mut i = 0;
        for y in 0..config.size.y {
            for x in 0..config.size.x {
                let p = voxel_center(config.offset + Vector3::new(x, y, z as i32), vs);
                integrate_voxel(&mut voxels[i], &p, input, params);
                i += 1;
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{HashConfig, VolumeRead};
    use crate::voxel::{VoxelF, VoxelS, VoxelSRgb};

    fn camera(width: usize, height: usize, depth: f32) -> (Image2D<f32>, Intrinsics) {
        let intr = Intrinsics::new(100.0, 100.0, width as f64 / 2.0, height as f64 / 2.0, width as u32, height as u32).unwrap();
        (Image2D::new(width, height, depth), intr)
    }

    #[test]
    fn behind_camera_is_rejected() {
        let (img, intr) = camera(20, 20, 1.0);
        let cam = ProjectedImage::new(&img, &Pose::identity(), &intr);
        let mut v = VoxelS::default();
        assert_eq!(update_voxel_depth(&mut v, &Vector3::new(0.0, 0.0, -1.0), &cam, 0.02, 100), -1.0);
        assert_eq!(update_voxel_depth(&mut v, &Vector3::new(0.0, 0.0, 0.0), &cam, 0.02, 100), -1.0);
        assert_eq!(v, VoxelS::default());
    }

    #[test]
    fn fresh_voxel_takes_observation() {
        let (img, intr) = camera(20, 20, 1.0);
        let cam = ProjectedImage::new(&img, &Pose::identity(), &intr);
        let mut v = VoxelF::default();
        let eta = update_voxel_depth(&mut v, &Vector3::new(0.0, 0.0, 0.99), &cam, 0.02, 100);
        assert!((eta - 0.01).abs() < 1e-6);
        assert!((v.sdf - 0.5).abs() < 1e-4);
        assert_eq!(v.w_depth, 1);
    }

    #[test]
    fn far_behind_surface_untouched() {
        let (img, intr) = camera(20, 20, 1.0);
        let cam = ProjectedImage::new(&img, &Pose::identity(), &intr);
        let mut v = VoxelS::default();
        let eta = update_voxel_depth(&mut v, &Vector3::new(0.0, 0.0, 1.05), &cam, 0.02, 100);
        assert!((eta + 0.05).abs() < 1e-6);
        assert_eq!(v, VoxelS::default());
    }

    #[test]
    fn saturated_weight_converges() {
        let (img, intr) = camera(20, 20, 1.0);
        let cam = ProjectedImage::new(&img, &Pose::identity(), &intr);
        let mut v = VoxelF { sdf: 1.0, w_depth: 5 };
        for _ in 0..2000 {
            update_voxel_depth(&mut v, &Vector3::new(0.0, 0.0, 0.99), &cam, 0.02, 5);
            assert_eq!(v.w_depth, 5);
        }
        assert!((v.sdf - 0.5).abs() < 1e-3);
    }

    #[test]
    fn colour_blend() {
        let (depth, intr) = camera(20, 20, 1.0);
        let input = |rgb| IntegrationInput {
            depth: ProjectedImage::new(&depth, &Pose::identity(), &intr),
            rgb: Some(ProjectedImage::new(rgb, &Pose::identity(), &intr)),
        };
        let red = Image2D::new(20, 20, [200u8, 0, 0]);
        let dark = Image2D::new(20, 20, [100u8, 0, 0]);
        let params = SceneParams::default();
        let p = Vector3::new(0.0, 0.0, 0.99);
        let mut v = VoxelSRgb::default();
        integrate_voxel(&mut v, &p, &input(&red), &params);
        assert_eq!((v.clr, v.w_color), ([200, 0, 0], 1));
        integrate_voxel(&mut v, &p, &input(&dark), &params);
        assert_eq!((v.clr, v.w_color), ([150, 0, 0], 2));
        // outside the image: nothing changes
        let before = v;
        integrate_voxel(&mut v, &Vector3::new(5.0, 0.0, 0.99), &input(&dark), &params);
        assert_eq!(v, before);
    }

    #[test]
    fn hash_empty_visible_list_is_noop() {
        let (depth, intr) = camera(20, 20, 1.0);
        let mut vol = HashVolume::<VoxelS>::new(HashConfig { bucket_count: 64, bucket_size: 2, excess_count: 64, block_count: 64 }, 0.004);
        vol.insert_block(Vector3::new(0, 0, 31)).unwrap();
        let before = vol.vba().block(0).to_vec();
        let input = IntegrationInput { depth: ProjectedImage::new(&depth, &Pose::identity(), &intr), rgb: None };
        integrate_hash(&mut vol, &[], &input, &SceneParams::default());
        assert_eq!(vol.vba().block(0), &before[..]);
        let entry = vol.table().find_allocated(Vector3::new(0, 0, 31)).unwrap().0;
        integrate_hash(&mut vol, &[entry], &input, &SceneParams::default());
        assert_ne!(vol.vba().block(0), &before[..]);
        assert!(vol.read_voxel(Vector3::new(0, 0, 248)).unwrap().w_depth == 1);
    }
}
