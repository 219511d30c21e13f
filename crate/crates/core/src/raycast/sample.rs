//! Trilinear reads of the SDF and colour fields.

use nalgebra::Vector3;

use crate::index::VolumeRead;
use crate::voxel::Voxel;

/// Base voxel and fractional offsets of a world point. Voxel `v` has its
/// centre at `(v + 0.5) · voxel_size`.
#[inline]
fn cell(p: &Vector3<f64>, voxel_size: f64) -> (Vector3<i32>, Vector3<f64>) {
    let u = p / voxel_size - Vector3::repeat(0.5);
    let base = u.map(f64::floor);
    (base.map(|c| c as i32), u - base)
}

#[inline]
fn blend(c: &[f64; 8], f: &Vector3<f64>) -> f64 {
    let x00 = c[0] + (c[1] - c[0]) * f.x;
    let x10 = c[2] + (c[3] - c[2]) * f.x;
    let x01 = c[4] + (c[5] - c[4]) * f.x;
    let x11 = c[6] + (c[7] - c[6]) * f.x;
    let y0 = x00 + (x10 - x00) * f.y;
    let y1 = x01 + (x11 - x01) * f.y;
    y0 + (y1 - y0) * f.z
}

fn sdf_corners<V: Voxel>(n: &[V; 8]) -> [f64; 8] {
    std::array::from_fn(|i| n[i].sdf() as f64)
}

/// Trilinear SDF at a world point; `None` if any of the eight neighbours is
/// missing.
#[inline]
pub fn trilinear_sdf<V: Voxel, R: VolumeRead<V> + ?Sized>(volume: &R, p: &Vector3<f64>) -> Option<f64> {
    let (base, f) = cell(p, volume.voxel_size() as f64);
    let n = volume.read_neighbourhood(base)?;
    Some(blend(&sdf_corners(&n), &f))
}

/// Trilinear SDF and its exact gradient (per metre) inside the cell.
pub fn trilinear_sdf_grad<V: Voxel, R: VolumeRead<V> + ?Sized>(volume: &R, p: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let vs = volume.voxel_size() as f64;
    let (base, f) = cell(p, vs);
    let c = sdf_corners(&volume.read_neighbourhood(base)?);
    let value = blend(&c, &f);
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    // d/dx: differences along x, blended over y and z
    let dx = lerp(
        lerp(c[1] - c[0], c[3] - c[2], f.y),
        lerp(c[5] - c[4], c[7] - c[6], f.y),
        f.z,
    );
    let dy = lerp(
        lerp(c[2] - c[0], c[3] - c[1], f.x),
        lerp(c[6] - c[4], c[7] - c[5], f.x),
        f.z,
    );
    let dz = lerp(
        lerp(c[4] - c[0], c[5] - c[1], f.x),
        lerp(c[6] - c[2], c[7] - c[3], f.x),
        f.y,
    );
    Some((value, Vector3::new(dx, dy, dz) / vs))
}

/// Value of the voxel containing `p`, without interpolation.
#[inline]
pub fn nearest_sdf<V: Voxel, R: VolumeRead<V> + ?Sized>(volume: &R, p: &Vector3<f64>) -> Option<f64> {
    let v = (p / volume.voxel_size() as f64).map(|c| c.floor() as i32);
    volume.read_voxel(v).map(|v| v.sdf() as f64)
}

/// Trilinear colour, channels in `[0, 255]`.
pub fn trilinear_color<V: Voxel, R: VolumeRead<V> + ?Sized>(volume: &R, p: &Vector3<f64>) -> Option<Vector3<f64>> {
    let (base, f) = cell(p, volume.voxel_size() as f64);
    let n = volume.read_neighbourhood(base)?;
    Some(Vector3::from_fn(|k, _| {
        let c: [f64; 8] = std::array::from_fn(|i| n[i].color()[k] as f64);
        blend(&c, &f)
    }))
}

/// Unit surface normal from central differences of the trilinear field at
/// one voxel distance, falling back to the in-cell gradient.
pub fn sdf_normal<V: Voxel, R: VolumeRead<V> + ?Sized>(volume: &R, p: &Vector3<f64>) -> Option<Vector3<f64>> {
    let vs = volume.voxel_size() as f64;
    let central = || -> Option<Vector3<f64>> {
        let mut g = Vector3::zeros();
        for k in 0..3 {
            let mut d = Vector3::zeros();
            d[k] = vs;
            g[k] = trilinear_sdf(volume, &(p + d))? - trilinear_sdf(volume, &(p - d))?;
        }
        Some(g)
    };
    let g = central().or_else(|| trilinear_sdf_grad(volume, p).map(|(_, g)| g))?;
    let n = g.norm();
    (n > 1e-12 && n.is_finite()).then(|| g / n)
}
