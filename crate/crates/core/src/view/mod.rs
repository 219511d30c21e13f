//! Input side of the pipeline: calibration files, disparity conversion,
//! PPM/PGM frames and analytic test scenes.

mod calib;
mod disparity;
pub mod pnm;
pub mod synth;

pub use calib::{parse_calibration, Calibration};
pub use disparity::{depth_to_disparity, disparity_image_to_depth, disparity_to_depth, DEFAULT_MAX_DEPTH};

use crate::math::{Image2D, Rgb};

/// One calibrated input frame. Depth is in metres; values `<= 0` mark
/// missing measurements.
#[derive(Debug, Clone)]
pub struct View {
    pub depth: Image2D<f32>,
    pub rgb: Option<Image2D<Rgb>>,
}

impl View {
    pub fn new(depth: Image2D<f32>, rgb: Option<Image2D<Rgb>>) -> Self {
        Self { depth, rgb }
    }

    pub fn valid_depth_count(&self) -> usize {
        self.depth.data().iter().filter(|d| **d > 0.0).count()
    }
}
