use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};

use crate::error::CalibrationError;
use crate::math::{Intrinsics, Pose};

/// Rotations further than this from orthonormal are rejected.
const ORTHONORMAL_TOLERANCE: f64 = 1e-3;
/// Below this the rotation is kept verbatim.
const REORTHONORMALIZE_ABOVE: f64 = 1e-9;

/// Two-camera calibration: RGB and depth intrinsics, the RGB-to-depth
/// extrinsic and the disparity model parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub rgb: Intrinsics,
    pub depth: Intrinsics,
    /// Maps points in RGB camera coordinates to depth camera coordinates.
    pub rgb_to_depth: Pose,
    pub disparity_a: f64,
    pub disparity_b: f64,
}

impl Calibration {
    /// Both cameras share `intrinsics`, identity extrinsic, and the disparity
    /// parameters of a typical structured-light sensor.
    pub fn shared(intrinsics: Intrinsics) -> Self {
        Self {
            rgb: intrinsics,
            depth: intrinsics,
            rgb_to_depth: Pose::identity(),
            disparity_a: 1135.09,
            disparity_b: 0.0819141,
        }
    }

    pub fn depth_to_rgb(&self) -> Pose {
        self.rgb_to_depth.inverse()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CalibrationError> {
        let text = std::fs::read_to_string(path)?;
        parse_calibration(&text)
    }

    /// Serializes in the same block layout that [`parse_calibration`] reads.
    /// Numbers use the shortest representation that parses back exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for intr in [&self.rgb, &self.depth] {
            let _ = writeln!(s, "{} {}", intr.width, intr.height);
            let _ = writeln!(s, "{} {}", intr.fx, intr.fy);
            let _ = writeln!(s, "{} {}", intr.cx, intr.cy);
            s.push('\n');
        }
        let r = &self.rgb_to_depth.rotation;
        let t = &self.rgb_to_depth.translation;
        for row in 0..3 {
            let _ = writeln!(s, "{} {} {} {}", r[(row, 0)], r[(row, 1)], r[(row, 2)], t[row]);
        }
        s.push('\n');
        let _ = writeln!(s, "{} {}", self.disparity_a, self.disparity_b);
        s
    }
}

impl FromStr for Calibration {
    type Err = CalibrationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_calibration(s)
    }
}

/// Tokens per non-empty line, with the block each line belongs to.
const LAYOUT: [(usize, usize); 10] = [
    (2, 1),
    (2, 1),
    (2, 1),
    (2, 2),
    (2, 2),
    (2, 2),
    (4, 3),
    (4, 3),
    (4, 3),
    (2, 4),
];

/// Parses the whitespace-delimited calibration layout:
///
/// ```text
/// width height          \
/// fx fy                  } RGB camera, then the same for depth
/// cx cy                 /
/// r00 r01 r02 t0        \
/// r10 r11 r12 t1         } RGB-to-depth extrinsic
/// r20 r21 r22 t2        /
/// a b                   disparity model
/// ```
///
/// Blank lines are ignored. Errors report the 1-based line number of the
/// input text and the block (1 RGB, 2 depth, 3 extrinsic, 4 disparity).
pub fn parse_calibration(text: &str) -> Result<Calibration, CalibrationError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let mut values: Vec<Vec<f64>> = Vec::with_capacity(LAYOUT.len());
    for &(count, block) in &LAYOUT {
        let (line, content) = lines.next().ok_or(CalibrationError::Truncated { block })?;
        let err = |message: String| CalibrationError::Parse { line, block, message };
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.len() != count {
            return Err(err(format!("expected {count} values, found {}", tokens.len())));
        }
        let row = tokens
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("not a number: {t:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        values.push(row);
    }
    if let Some((line, _)) = lines.next() {
        return Err(CalibrationError::Parse {
            line,
            block: 4,
            message: "trailing content".into(),
        });
    }

    let intrinsics = |first: usize, block: usize| -> Result<Intrinsics, CalibrationError> {
        let size = &values[first];
        let as_size = |v: f64| -> Result<u32, CalibrationError> {
            if v.fract() == 0.0 && v > 0.0 && v <= u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(CalibrationError::Parse {
                    line: 0,
                    block,
                    message: format!("image size {v} is not a positive integer"),
                })
            }
        };
        let intr = Intrinsics {
            width: as_size(size[0])?,
            height: as_size(size[1])?,
            fx: values[first + 1][0],
            fy: values[first + 1][1],
            cx: values[first + 2][0],
            cy: values[first + 2][1],
        };
        intr.validate()?;
        Ok(intr)
    };
    let rgb = intrinsics(0, 1)?;
    let depth = intrinsics(3, 2)?;

    let rotation = Matrix3::from_fn(|r, c| values[6 + r][c]);
    let translation = Vector3::new(values[6][3], values[7][3], values[8][3]);
    let mut rgb_to_depth = Pose::new(rotation, translation);
    let ortho = rgb_to_depth.orthonormality_error();
    if ortho > ORTHONORMAL_TOLERANCE || rotation.determinant() <= 0.0 {
        return Err(CalibrationError::NotOrthonormal(ortho));
    }
    if ortho > REORTHONORMALIZE_ABOVE {
        rgb_to_depth = rgb_to_depth.reorthonormalized();
    }

    Ok(Calibration {
        rgb,
        depth,
        rgb_to_depth,
        disparity_a: values[9][0],
        disparity_b: values[9][1],
    })
}
