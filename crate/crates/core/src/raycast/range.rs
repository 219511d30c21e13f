//! Expected-depth range image built by forward-projecting visible blocks.

use nalgebra::{Vector2, Vector3};

use crate::index::BLOCK_SIDE;
use crate::math::{project, Intrinsics, Pose};

/// Edge length in pixels of a range-image fragment.
pub const FRAGMENT: usize = 16;

/// Per-fragment `(min, max)` z-depth search interval. Fragments with
/// `min > max` are empty.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    width: usize,
    height: usize,
    cols: usize,
    ranges: Vec<(f32, f32)>,
}

const EMPTY: (f32, f32) = (f32::INFINITY, f32::NEG_INFINITY);

impl RangeImage {
    pub fn empty(width: usize, height: usize) -> Self {
        let cols = width.div_ceil(FRAGMENT);
        let rows = height.div_ceil(FRAGMENT);
        Self {
            width,
            height,
            cols,
            ranges: vec![EMPTY; cols * rows],
        }
    }

    /// The same interval everywhere.
    pub fn uniform(width: usize, height: usize, min: f32, max: f32) -> Self {
        let mut r = Self::empty(width, height);
        r.ranges.fill((min, max));
        r
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Search interval of a pixel, `None` where nothing is expected.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<(f32, f32)> {
        let r = self.ranges[(y / FRAGMENT) * self.cols + x / FRAGMENT];
        (r.0 <= r.1).then_some(r)
    }

    pub fn fragments(&self) -> &[(f32, f32)] {
        &self.ranges
    }

    fn combine(&mut self, index: usize, range: (f32, f32)) {
        let r = &mut self.ranges[index];
        r.0 = r.0.min(range.0);
        r.1 = r.1.max(range.1);
    }
}

/// A block's footprint: fragment rectangle and depth interval.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Footprint {
    lo: [usize; 2],
    hi: [usize; 2],
    z: (f32, f32),
}

fn footprint(block: Vector3<i32>, voxel_size: f64, pose: &Pose, intr: &Intrinsics, near: f64) -> Option<Footprint> {
    let block_len = voxel_size * BLOCK_SIDE as f64;
    let origin = block.map(|c| c as f64) * block_len;
    let corners: [Vector3<f64>; 8] = std::array::from_fn(|i| {
        let d = Vector3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64) * block_len;
        pose.transform_point(&(origin + d))
    });
    let zmin = corners.iter().map(|c| c.z).fold(f64::INFINITY, f64::min);
    let zmax = corners.iter().map(|c| c.z).fold(f64::NEG_INFINITY, f64::max);
    if zmax < near {
        return None;
    }
    let (w, h) = (intr.width as f64, intr.height as f64);
    let (lo, hi) = if zmin < near {
        // straddles the near plane: no finite bounding box
        (Vector2::new(0.0, 0.0), Vector2::new(w - 1.0, h - 1.0))
    } else {
        let mut lo = Vector2::repeat(f64::INFINITY);
        let mut hi = Vector2::repeat(f64::NEG_INFINITY);
        for c in &corners {
            let p = project(intr, c);
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        (lo, hi)
    };
    // pixel centres are at integer coordinates
    let x0 = lo.x.ceil().max(0.0);
    let y0 = lo.y.ceil().max(0.0);
    let x1 = hi.x.floor().min(w - 1.0);
    let y1 = hi.y.floor().min(h - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some(Footprint {
        lo: [x0 as usize / FRAGMENT, y0 as usize / FRAGMENT],
        hi: [x1 as usize / FRAGMENT, y1 as usize / FRAGMENT],
        z: (zmin.max(near) as f32, zmax as f32),
    })
}

/// Builds the range image from the positions of the visible blocks.
///
/// Each block emits one entry per fragment its projected bounding box
/// covers. Entry counts are turned into output offsets with an exclusive
/// prefix sum, the entries are written, and then min/max-combined into the
/// image in list order.
pub fn create_expected_depths(
    blocks: &[Vector3<i32>],
    voxel_size: f64,
    pose: &Pose,
    intr: &Intrinsics,
    near: f64,
) -> RangeImage {
    let mut image = RangeImage::empty(intr.width as usize, intr.height as usize);
    let footprints: Vec<Option<Footprint>> = blocks
        .iter()
        .map(|b| footprint(*b, voxel_size, pose, intr, near))
        .collect();
    let counts: Vec<usize> = footprints
        .iter()
        .map(|f| f.map_or(0, |f| (f.hi[0] - f.lo[0] + 1) * (f.hi[1] - f.lo[1] + 1)))
        .collect();
    let mut offsets = Vec::with_capacity(counts.len());
    let mut total = 0;
    for c in &counts {
        offsets.push(total);
        total += c;
    }
    let mut entries = vec![(0usize, EMPTY); total];
    for (f, &start) in footprints.iter().zip(&offsets) {
        let Some(f) = f else { continue };
        let mut k = start;
        for fy in f.lo[1]..=f.hi[1] {
            for fx in f.lo[0]..=f.hi[0] {
                entries[k] = (fy * image.cols + fx, f.z);
                k += 1;
            }
        }
    }
    for (index, z) in entries {
        image.combine(index, z);
    }
    image
}
