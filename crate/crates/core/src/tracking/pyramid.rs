//! Resolution hierarchies and image gradients.

use nalgebra::{Vector2, Vector3};

use crate::math::{Image2D, Rgb};

/// Relative depth spread above which a 2×2 block straddles a discontinuity.
pub const DEPTH_EDGE_TOLERANCE: f32 = 0.05;

/// Halves a depth image. Each output pixel is the mean of the valid
/// (`> 0`) samples of its 2×2 block that lie within
/// [`DEPTH_EDGE_TOLERANCE`] (relative) of the nearest one, so foreground
/// and background are not blended at silhouettes. Odd edges use the
/// samples that exist.
pub fn downsample_depth(depth: &Image2D<f32>) -> Image2D<f32> {
    let (w, h) = (depth.width(), depth.height());
    Image2D::from_fn(w.div_ceil(2), h.div_ceil(2), |x, y| {
        let mut samples = [0.0f32; 4];
        let mut n = 0;
        for sy in 2 * y..(2 * y + 2).min(h) {
            for sx in 2 * x..(2 * x + 2).min(w) {
                let d = *depth.get(sx, sy);
                if d > 0.0 {
                    samples[n] = d;
                    n += 1;
                }
            }
        }
        if n == 0 {
            return 0.0;
        }
        let near = samples[..n].iter().copied().fold(f32::INFINITY, f32::min);
        let limit = near * (1.0 + DEPTH_EDGE_TOLERANCE);
        let (mut sum, mut count) = (0.0f32, 0u32);
        for &d in &samples[..n] {
            if d <= limit {
                sum += d;
                count += 1;
            }
        }
        sum / count as f32
    })
}

/// Halves a colour image by 2×2 mean.
pub fn downsample_color(image: &Image2D<Vector3<f32>>) -> Image2D<Vector3<f32>> {
    let (w, h) = (image.width(), image.height());
    Image2D::from_fn(w.div_ceil(2), h.div_ceil(2), |x, y| {
        let mut sum = Vector3::zeros();
        let mut n = 0.0;
        for sy in 2 * y..(2 * y + 2).min(h) {
            for sx in 2 * x..(2 * x + 2).min(w) {
                sum += image.get(sx, sy);
                n += 1.0;
            }
        }
        sum / n
    })
}

/// Levels of an image, level 0 at full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePyramid<T> {
    pub levels: Vec<Image2D<T>>,
}

impl<T> ImagePyramid<T> {
    pub fn level(&self, l: usize) -> &Image2D<T> {
        &self.levels[l]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

pub fn build_depth_pyramid(depth: &Image2D<f32>, levels: usize) -> ImagePyramid<f32> {
    assert!(levels >= 1);
    let mut out = vec![depth.clone()];
    for _ in 1..levels {
        let next = downsample_depth(out.last().expect("non-empty"));
        out.push(next);
    }
    ImagePyramid { levels: out }
}

pub fn rgb_to_float(image: &Image2D<Rgb>) -> Image2D<Vector3<f32>> {
    image.map(|c| Vector3::new(c[0] as f32, c[1] as f32, c[2] as f32))
}

pub fn build_color_pyramid(image: &Image2D<Rgb>, levels: usize) -> ImagePyramid<Vector3<f32>> {
    assert!(levels >= 1);
    let mut out = vec![rgb_to_float(image)];
    for _ in 1..levels {
        let next = downsample_color(out.last().expect("non-empty"));
        out.push(next);
    }
    ImagePyramid { levels: out }
}

/// Mean of the three channels.
pub fn intensity(image: &Image2D<Vector3<f32>>) -> Image2D<f32> {
    image.map(|c| (c.x + c.y + c.z) / 3.0)
}

/// Central-difference gradient; zero on the one-pixel border.
pub fn intensity_gradients(image: &Image2D<f32>) -> Image2D<Vector2<f32>> {
    let (w, h) = (image.width(), image.height());
    Image2D::from_fn(w, h, |x, y| {
        if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
            return Vector2::zeros();
        }
        Vector2::new(
            (image.get(x + 1, y) - image.get(x - 1, y)) * 0.5,
            (image.get(x, y + 1) - image.get(x, y - 1)) * 0.5,
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image() {
        let p = build_depth_pyramid(&Image2D::new(13, 7, 1.5f32), 4);
        let sizes: Vec<_> = p.levels.iter().map(|l| (l.width(), l.height())).collect();
        assert_eq!(sizes, vec![(13, 7), (7, 4), (4, 2), (2, 1)]);
        assert!(p.levels.iter().all(|l| l.data().iter().all(|&d| d == 1.5)));
        let g = intensity_gradients(&Image2D::new(5, 5, 3.0f32));
        assert!(g.data().iter().all(|v| *v == Vector2::zeros()));
    }

    #[test]
    fn validity_aware_mean() {
        let d = Image2D::from_vec(2, 2, vec![1.0f32, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(downsample_depth(&d).data(), &[1.0]);
        let d = Image2D::from_vec(2, 2, vec![0.0f32; 4]).unwrap();
        assert_eq!(downsample_depth(&d).data(), &[0.0]);
        let d = Image2D::from_vec(2, 1, vec![2.0f32, 2.04]).unwrap();
        assert_eq!(downsample_depth(&d).data(), &[2.02]);
        // a silhouette keeps the foreground only
        let d = Image2D::from_vec(2, 2, vec![1.0f32, 1.02, 2.0, 2.1]).unwrap();
        assert_eq!(downsample_depth(&d).data(), &[1.01]);
    }

    #[test]
    fn ramp_gradient() {
        let img = Image2D::from_fn(8, 6, |x, y| 2.0 * x as f32 - 0.5 * y as f32);
        let g = intensity_gradients(&img);
        for y in 1..5 {
            for x in 1..7 {
                assert_eq!(*g.get(x, y), Vector2::new(2.0, -0.5));
            }
        }
    }

    #[test]
    fn color_mean() {
        let img = Image2D::from_vec(2, 1, vec![[10u8, 20, 30], [30, 40, 50]]).unwrap();
        let p = build_color_pyramid(&img, 2);
        assert_eq!(*p.level(1).get(0, 0), Vector3::new(20.0, 30.0, 40.0));
    }
}
