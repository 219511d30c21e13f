use crate::math::Image2D;

use super::Calibration;

/// Depths beyond this many metres are treated as missing.
pub const DEFAULT_MAX_DEPTH: f32 = 8.0;

/// Converts a raw disparity to metres with `depth = 8·b·fx / (a − d)`.
///
/// Returns `0.0` (missing) at and beyond the pole `d >= a` and for depths
/// above `max_depth`.
#[inline]
pub fn disparity_to_depth(d: u16, a: f64, b: f64, fx: f64, max_depth: f32) -> f32 {
    let denom = a - d as f64;
    if denom <= 0.0 {
        return 0.0;
    }
    let depth = (8.0 * b * fx / denom) as f32;
    if depth > 0.0 && depth <= max_depth {
        depth
    } else {
        0.0
    }
}

/// Inverse of [`disparity_to_depth`], rounded to the nearest raw value.
/// Missing depths map to `a` rounded up, which decodes as missing.
pub fn depth_to_disparity(depth: f32, a: f64, b: f64, fx: f64) -> u16 {
    if depth <= 0.0 {
        return a.ceil().clamp(0.0, u16::MAX as f64) as u16;
    }
    let d = a - 8.0 * b * fx / depth as f64;
    d.round().clamp(0.0, u16::MAX as f64) as u16
}

pub fn disparity_image_to_depth(raw: &Image2D<u16>, calib: &Calibration, max_depth: f32) -> Image2D<f32> {
    raw.map(|&d| disparity_to_depth(d, calib.disparity_a, calib.disparity_b, calib.depth.fx, max_depth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: f64 = 1135.09;
    const B: f64 = 0.0819141;
    const FX: f64 = 573.71;

    #[test]
    fn examples() {
        assert_eq!(disparity_to_depth(1136, A, B, FX, 8.0), 0.0);
        let a = 1135.0;
        assert_eq!(disparity_to_depth(1135, a, B, FX, 8.0), 0.0);
        let expected = 8.0 * 0.0819141 * 573.71 / 1000.0;
        let got = disparity_to_depth(135, 1135.0, B, FX, 8.0);
        assert!((got as f64 - expected).abs() < 1e-6);
        assert!((got - 0.3759).abs() < 1e-4);
    }

    #[test]
    fn max_depth_cuts_off() {
        // 8·b·fx ≈ 375.96, so a − d < 47 gives more than 8 m
        assert_eq!(disparity_to_depth(1100, A, B, FX, 8.0), 0.0);
        assert!(disparity_to_depth(1000, A, B, FX, 8.0) > 0.0);
    }

    proptest! {
        #[test]
        fn increasing_in_disparity(d1 in 0u16..1135, step in 1u16..100) {
            let d2 = d1 + step;
            let (z1, z2) = (disparity_to_depth(d1, A, B, FX, f32::MAX), disparity_to_depth(d2, A, B, FX, f32::MAX));
            if (d2 as f64) < A {
                prop_assert!(z1 < z2);
            } else {
                prop_assert_eq!(z2, 0.0);
            }
        }

        #[test]
        fn inverse_round_trip(d in 0u16..1130) {
            let z = disparity_to_depth(d, A, B, FX, f32::MAX);
            prop_assert_eq!(depth_to_disparity(z, A, B, FX), d);
        }
    }
}
