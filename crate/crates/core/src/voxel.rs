//! Voxel payloads and SDF quantization.
//!
//! Four payloads are provided: 16-bit quantized or `f32` SDF, each with or
//! without colour. Engines are generic over [`Voxel`] and branch on
//! [`Voxel::HAS_COLOR`] where colour matters.

use std::fmt::Debug;

/// Quantization scale of the 16-bit SDF.
pub const SDF_SCALE: f32 = 32767.0;

/// Raw value of a freshly constructed quantized voxel.
pub const SDF_INITIAL_VALUE: i16 = 32767;

#[inline]
pub fn sdf_value_to_float(q: i16) -> f32 {
    q as f32 / SDF_SCALE
}

/// Quantizes a normalized SDF value. Input is clamped to `[-1, 1]` first so
/// out-of-band values saturate instead of wrapping; the cast truncates
/// toward zero.
#[inline]
pub fn sdf_float_to_value(f: f32) -> i16 {
    (f.clamp(-1.0, 1.0) * SDF_SCALE) as i16
}

/// Tag written into host store headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum VoxelType {
    Short = 1,
    Float = 2,
    ShortRgb = 3,
    FloatRgb = 4,
}

impl VoxelType {
    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            1 => Some(Self::Short),
            2 => Some(Self::Float),
            3 => Some(Self::ShortRgb),
            4 => Some(Self::FloatRgb),
            _ => None,
        }
    }

    pub fn has_color(self) -> bool {
        matches!(self, Self::ShortRgb | Self::FloatRgb)
    }
}

pub trait Voxel: Copy + Default + PartialEq + Debug + Send + Sync + 'static {
    const HAS_COLOR: bool;
    const TYPE: VoxelType;
    /// Bytes per voxel in the little-endian host store layout.
    const ENCODED_LEN: usize;

    /// Normalized SDF in `[-1, 1]`.
    fn sdf(&self) -> f32;
    fn set_sdf(&mut self, value: f32);
    fn w_depth(&self) -> u8;
    fn set_w_depth(&mut self, w: u8);

    fn color(&self) -> [u8; 3] {
        [0; 3]
    }
    fn set_color(&mut self, _clr: [u8; 3]) {}
    fn w_color(&self) -> u8 {
        0
    }
    fn set_w_color(&mut self, _w: u8) {}

    fn encode(&self, out: &mut [u8]);
    fn decode(bytes: &[u8]) -> Self;

    /// Weighted fusion of two independently accumulated voxels of the same
    /// location, used when host data meets freshly integrated data.
    fn fuse(host: &Self, active: &Self, max_w: u8) -> Self;
}

/// Blends two weighted colours per channel, rounding to nearest.
fn fuse_color<V: Voxel>(out: &mut V, host: &V, active: &V, max_w: u8) {
    let (wh, wa) = (host.w_color() as u32, active.w_color() as u32);
    if wh == 0 {
        out.set_color(active.color());
        out.set_w_color(active.w_color());
        return;
    }
    if wa == 0 {
        out.set_color(host.color());
        out.set_w_color(host.w_color());
        return;
    }
    let (ch, ca) = (host.color(), active.color());
    let total = wh + wa;
    let mut clr = [0u8; 3];
    for k in 0..3 {
        clr[k] = ((ch[k] as u32 * wh + ca[k] as u32 * wa + total / 2) / total) as u8;
    }
    out.set_color(clr);
    out.set_w_color(total.min(max_w as u32) as u8);
}

/// Weighted mean of two raw quantized SDF values, computed the way a depth
/// update is: dequantize, average in f32, truncate back.
fn fuse_quantized(qh: i16, wh: u32, qa: i16, wa: u32) -> i16 {
    let f = (wh as f32 * sdf_value_to_float(qh) + wa as f32 * sdf_value_to_float(qa)) / (wh + wa) as f32;
    sdf_float_to_value(f)
}

/// Quantized SDF, depth weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoxelS {
    pub sdf: i16,
    pub w_depth: u8,
}

impl Default for VoxelS {
    fn default() -> Self {
        Self {
            sdf: SDF_INITIAL_VALUE,
            w_depth: 0,
        }
    }
}

/// Quantized SDF with colour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoxelSRgb {
    pub sdf: i16,
    pub w_depth: u8,
    pub clr: [u8; 3],
    pub w_color: u8,
}

impl Default for VoxelSRgb {
    fn default() -> Self {
        Self {
            sdf: SDF_INITIAL_VALUE,
            w_depth: 0,
            clr: [0; 3],
            w_color: 0,
        }
    }
}

/// Floating point SDF, depth weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelF {
    pub sdf: f32,
    pub w_depth: u8,
}

impl Default for VoxelF {
    fn default() -> Self {
        Self { sdf: 1.0, w_depth: 0 }
    }
}

/// Floating point SDF with colour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelFRgb {
    pub sdf: f32,
    pub w_depth: u8,
    pub clr: [u8; 3],
    pub w_color: u8,
}

impl Default for VoxelFRgb {
    fn default() -> Self {
        Self {
            sdf: 1.0,
            w_depth: 0,
            clr: [0; 3],
            w_color: 0,
        }
    }
}

macro_rules! depth_accessors {
    () => {
        #[inline]
        fn w_depth(&self) -> u8 {
            self.w_depth
        }
        #[inline]
        fn set_w_depth(&mut self, w: u8) {
            self.w_depth = w;
        }
    };
}

macro_rules! color_accessors {
    () => {
        #[inline]
        fn color(&self) -> [u8; 3] {
            self.clr
        }
        #[inline]
        fn set_color(&mut self, clr: [u8; 3]) {
            self.clr = clr;
        }
        #[inline]
        fn w_color(&self) -> u8 {
            self.w_color
        }
        #[inline]
        fn set_w_color(&mut self, w: u8) {
            self.w_color = w;
        }
    };
}

macro_rules! quantized_sdf {
    () => {
        #[inline]
        fn sdf(&self) -> f32 {
            sdf_value_to_float(self.sdf)
        }
        #[inline]
        fn set_sdf(&mut self, value: f32) {
            self.sdf = sdf_float_to_value(value);
        }
    };
}

macro_rules! float_sdf {
    () => {
        #[inline]
        fn sdf(&self) -> f32 {
            self.sdf
        }
        #[inline]
        fn set_sdf(&mut self, value: f32) {
            self.sdf = value.clamp(-1.0, 1.0);
        }
    };
}

/// Depth part of `fuse` shared by all payloads; `$mean` combines the SDFs.
macro_rules! fuse_depth {
    ($host:ident, $active:ident, $max_w:ident, $mean:expr) => {{
        let (wh, wa) = ($host.w_depth as u32, $active.w_depth as u32);
        if wa == 0 {
            let mut out = *$host;
            if Self::HAS_COLOR {
                fuse_color(&mut out, $host, $active, $max_w);
            }
            return out;
        }
        if wh == 0 {
            let mut out = *$active;
            if Self::HAS_COLOR {
                fuse_color(&mut out, $host, $active, $max_w);
            }
            return out;
        }
        let mut out = *$active;
        out.sdf = $mean(wh, wa);
        out.w_depth = (wh + wa).min($max_w as u32) as u8;
        if Self::HAS_COLOR {
            fuse_color(&mut out, $host, $active, $max_w);
        }
        out
    }};
}

impl Voxel for VoxelS {
    const HAS_COLOR: bool = false;
    const TYPE: VoxelType = VoxelType::Short;
    const ENCODED_LEN: usize = 3;

    quantized_sdf!();
    depth_accessors!();

    fn encode(&self, out: &mut [u8]) {
        out[0..2].copy_from_slice(&self.sdf.to_le_bytes());
        out[2] = self.w_depth;
    }

    fn decode(b: &[u8]) -> Self {
        Self {
            sdf: i16::from_le_bytes([b[0], b[1]]),
            w_depth: b[2],
        }
    }

    fn fuse(host: &Self, active: &Self, max_w: u8) -> Self {
        fuse_depth!(host, active, max_w, |wh, wa| fuse_quantized(host.sdf, wh, active.sdf, wa))
    }
}

impl Voxel for VoxelSRgb {
    const HAS_COLOR: bool = true;
    const TYPE: VoxelType = VoxelType::ShortRgb;
    const ENCODED_LEN: usize = 7;

    quantized_sdf!();
    depth_accessors!();
    color_accessors!();

    fn encode(&self, out: &mut [u8]) {
        out[0..2].copy_from_slice(&self.sdf.to_le_bytes());
        out[2] = self.w_depth;
        out[3..6].copy_from_slice(&self.clr);
        out[6] = self.w_color;
    }

    fn decode(b: &[u8]) -> Self {
        Self {
            sdf: i16::from_le_bytes([b[0], b[1]]),
            w_depth: b[2],
            clr: [b[3], b[4], b[5]],
            w_color: b[6],
        }
    }

    fn fuse(host: &Self, active: &Self, max_w: u8) -> Self {
        fuse_depth!(host, active, max_w, |wh, wa| fuse_quantized(host.sdf, wh, active.sdf, wa))
    }
}

impl Voxel for VoxelF {
    const HAS_COLOR: bool = false;
    const TYPE: VoxelType = VoxelType::Float;
    const ENCODED_LEN: usize = 5;

    float_sdf!();
    depth_accessors!();

    fn encode(&self, out: &mut [u8]) {
        out[0..4].copy_from_slice(&self.sdf.to_le_bytes());
        out[4] = self.w_depth;
    }

    fn decode(b: &[u8]) -> Self {
        Self {
            sdf: f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
            w_depth: b[4],
        }
    }

    fn fuse(host: &Self, active: &Self, max_w: u8) -> Self {
        fuse_depth!(host, active, max_w, |wh: u32, wa: u32| {
            (host.sdf * wh as f32 + active.sdf * wa as f32) / (wh + wa) as f32
        })
    }
}

impl Voxel for VoxelFRgb {
    const HAS_COLOR: bool = true;
    const TYPE: VoxelType = VoxelType::FloatRgb;
    const ENCODED_LEN: usize = 9;

    float_sdf!();
    depth_accessors!();
    color_accessors!();

    fn encode(&self, out: &mut [u8]) {
        out[0..4].copy_from_slice(&self.sdf.to_le_bytes());
        out[4] = self.w_depth;
        out[5..8].copy_from_slice(&self.clr);
        out[8] = self.w_color;
    }

    fn decode(b: &[u8]) -> Self {
        Self {
            sdf: f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
            w_depth: b[4],
            clr: [b[5], b[6], b[7]],
            w_color: b[8],
        }
    }

    fn fuse(host: &Self, active: &Self, max_w: u8) -> Self {
        fuse_depth!(host, active, max_w, |wh: u32, wa: u32| {
            (host.sdf * wh as f32 + active.sdf * wa as f32) / (wh + wa) as f32
        })
    }
}
