use std::io;

use thiserror::Error;

use crate::math::Intrinsics;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid intrinsics {0:?}")]
    InvalidIntrinsics(Intrinsics),
    #[error("image of {width}x{height} cannot hold {len} samples")]
    ImageSize { width: usize, height: usize, len: usize },
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum IndexError {
    #[error("voxel block array is full")]
    VolumeFull,
    #[error("hash excess list is full")]
    HashFull,
    #[error("block position {0:?} does not fit the 16-bit entry layout")]
    OutOfRange([i32; 3]),
    #[error("allocation target {0} is stale")]
    StaleTarget(usize),
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected}, found {found:?}")]
    BadMagic { expected: &'static str, found: String },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("maxval {found} not supported, expected {expected}")]
    MaxVal { expected: u32, found: u32 },
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration line {line} (block {block}): {message}")]
    Parse { line: usize, block: usize, message: String },
    #[error("calibration truncated: block {block} missing")]
    Truncated { block: usize },
    #[error("extrinsic rotation is not orthonormal (error {0:.3e})")]
    NotOrthonormal(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackingError {
    #[error("only {found} valid correspondences, need {needed}")]
    InsufficientPairs { found: usize, needed: usize },
    #[error("normal equations are singular (condition {0:.3e})")]
    Singular(f64),
    #[error("no reference maps to track against")]
    NoReference,
    #[error("volume has no colour information")]
    NoColour,
}

#[derive(Debug, Error)]
pub enum SwapError {
    #[error("host store: {0}")]
    Io(#[from] io::Error),
    #[error("host store file is invalid: {0}")]
    BadStore(String),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Crate-level error for the frame pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Swap(#[from] SwapError),
    #[error(transparent)]
    Tracking(#[from] TrackingError),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
