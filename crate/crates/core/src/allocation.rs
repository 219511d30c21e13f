//! Allocation stage for the hash backend: find the blocks touched by the
//! truncation band around each depth sample, allocate the missing ones and
//! collect the blocks inside the view frustum.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::index::{AllocTarget, HashTable, HashVolume, Probe, VolumeRead, BLOCK_SIDE};
use crate::integration::SceneParams;
use crate::math::{Image2D, Intrinsics, Pose};
use crate::voxel::Voxel;

/// Frustum used to decide which blocks are visible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frustum {
    pub near: f64,
    pub far: f64,
    /// Extra pixels around the image that still count as inside.
    pub margin: f64,
}

impl Default for Frustum {
    fn default() -> Self {
        Self {
            near: 0.1,
            far: 8.0,
            margin: 8.0,
        }
    }
}

impl Frustum {
    pub fn with_margin(self, margin: f64) -> Self {
        Self { margin, ..self }
    }
}

/// Whether the 8×8×8 block at `block` may project into the image.
///
/// All eight corners of the block cell are projected; the block is visible
/// when their bounding box meets the image grown by `margin`. A block that
/// straddles the near plane is visible.
pub fn block_in_frustum(block: Vector3<i32>, voxel_size: f64, pose: &Pose, intr: &Intrinsics, frustum: &Frustum) -> bool {
    let block_len = voxel_size * BLOCK_SIDE as f64;
    let origin = block.map(|c| c as f64) * block_len;
    let mut corners = [Vector3::zeros(); 8];
    let (mut zmin, mut zmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, c) in corners.iter_mut().enumerate() {
        let d = Vector3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64) * block_len;
        *c = pose.transform_point(&(origin + d));
        zmin = zmin.min(c.z);
        zmax = zmax.max(c.z);
    }
    if zmax < frustum.near || zmin > frustum.far {
        return false;
    }
    if zmin < frustum.near {
        return true;
    }
    let (mut lo, mut hi) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
    for c in &corners {
        let p = crate::math::project(intr, c);
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    }
    let m = frustum.margin;
    hi.x >= -m && hi.y >= -m && lo.x <= intr.width as f64 - 1.0 + m && lo.y <= intr.height as f64 - 1.0 + m
}

/// Visits every grid cell the segment `a → b` passes through, in order.
///
/// Coordinates are in cell units (cell `c` covers `[c, c + 1)`). This is an
/// exact 3D DDA: the cells visited are those whose closed extent meets the
/// segment, with at most one extra cell where the segment passes exactly
/// through an edge or corner.
pub fn traverse_segment(a: &Vector3<f64>, b: &Vector3<f64>, mut visit: impl FnMut(Vector3<i32>)) {
    let mut cell = a.map(|c| c.floor() as i32);
    let end = b.map(|c| c.floor() as i32);
    let d = b - a;
    let mut step = [0i32; 3];
    let mut remaining = [0u32; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for k in 0..3 {
        remaining[k] = (end[k] - cell[k]).unsigned_abs();
        if remaining[k] == 0 {
            continue;
        }
        step[k] = (end[k] - cell[k]).signum();
        let boundary = if step[k] > 0 { cell[k] + 1 } else { cell[k] } as f64;
        t_max[k] = (boundary - a[k]) / d[k];
        t_delta[k] = 1.0 / d[k].abs();
    }
    visit(cell);
    loop {
        let mut axis = usize::MAX;
        for k in 0..3 {
            if remaining[k] > 0 && (axis == usize::MAX || t_max[k] < t_max[axis]) {
                axis = k;
            }
        }
        if axis == usize::MAX {
            break;
        }
        cell[axis] += step[axis];
        t_max[axis] += t_delta[axis];
        remaining[axis] -= 1;
        visit(cell);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Visibility {
    NotVisible = 0,
    Visible = 1,
    /// Hit by the depth band while its block lives in host storage.
    SwappedOutHit = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocRequest {
    pub block: Vector3<i32>,
    pub target: AllocTarget,
}

#[derive(Debug, Clone, Copy)]
enum Mark {
    Seen(usize, bool),
    Request(AllocRequest),
}

/// Per-entry scratch arrays of the allocation stage.
#[derive(Debug, Clone)]
pub struct AllocationScratch {
    /// Allocation request keyed by the entry index it would claim.
    pub alloc_requests: Vec<Option<AllocRequest>>,
    pub visibility: Vec<Visibility>,
    pub visible_list: Vec<usize>,
    /// Requests that lost their entry to a later writer in the same frame.
    overflow: Vec<Vector3<i32>>,
    touched: Vec<usize>,
}

impl AllocationScratch {
    pub fn new(entry_count: usize) -> Self {
        Self {
            alloc_requests: vec![None; entry_count],
            visibility: vec![Visibility::NotVisible; entry_count],
            visible_list: Vec::new(),
            overflow: Vec::new(),
            touched: Vec::new(),
        }
    }

    fn clear(&mut self) {
        for &i in &self.touched {
            self.alloc_requests[i] = None;
            self.visibility[i] = Visibility::NotVisible;
        }
        self.touched.clear();
        self.overflow.clear();
    }

    pub fn pending_requests(&self) -> usize {
        self.alloc_requests.iter().filter(|r| r.is_some()).count() + self.overflow.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AllocationStats {
    /// Distinct missing blocks requested this frame.
    pub requested: usize,
    pub allocated: usize,
    /// Swapped-out entries that received a fresh block.
    pub reactivated: usize,
    /// Requests dropped because the block array or excess list was full.
    pub failed: usize,
    pub visible: usize,
}

/// Marks the blocks crossed by the segment from depth `d − mu` to `d + mu`
/// along each valid pixel's ray.
///
/// Rows are processed in parallel; their marks are applied in pixel order,
/// so the outcome does not depend on scheduling. When two missing blocks
/// compete for the same entry, the later pixel keeps the slot and the
/// earlier block is queued for allocation after the main pass.
pub fn mark_blocks(
    table: &HashTable,
    depth: &Image2D<f32>,
    pose: &Pose,
    intr: &Intrinsics,
    params: &SceneParams,
    scratch: &mut AllocationScratch,
) {
    scratch.clear();
    let cam_to_world = pose.inverse();
    let block_len = params.voxel_size as f64 * BLOCK_SIDE as f64;
    let mu = params.mu as f64;
    let width = depth.width();

    let rows: Vec<Vec<Mark>> = depth
        .data()
        .par_chunks(width)
        .enumerate()
        .map(|(y, row)| {
            let mut marks = Vec::new();
            let mut last = None;
            for (x, &d) in row.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                let ray = intr.ray(x as f64, y as f64);
                let a = cam_to_world.transform_point(&(ray * (d as f64 - mu))) / block_len;
                let b = cam_to_world.transform_point(&(ray * (d as f64 + mu))) / block_len;
                traverse_segment(&a, &b, |block| {
                    // neighbouring pixels mostly hit the same blocks
                    if last == Some(block) {
                        return;
                    }
                    last = Some(block);
                    match table.probe(block) {
                        Ok(Probe::Present(entry)) => {
                            marks.push(Mark::Seen(entry, table.entry(entry).is_swapped_out()));
                        }
                        Ok(Probe::Vacant(target)) => marks.push(Mark::Request(AllocRequest { block, target })),
                        Err(_) => {}
                    }
                });
            }
            marks
        })
        .collect();

    for mark in rows.into_iter().flatten() {
        match mark {
            Mark::Seen(entry, swapped) => {
                if scratch.visibility[entry] == Visibility::NotVisible && scratch.alloc_requests[entry].is_none() {
                    scratch.touched.push(entry);
                }
                scratch.visibility[entry] = if swapped {
                    Visibility::SwappedOutHit
                } else {
                    Visibility::Visible
                };
            }
            Mark::Request(req) => {
                let key = req.target.key();
                match scratch.alloc_requests[key] {
                    Some(prev) if prev.block == req.block => {}
                    Some(prev) => {
                        scratch.overflow.push(prev.block);
                        scratch.alloc_requests[key] = Some(req);
                    }
                    None => {
                        if scratch.visibility[key] == Visibility::NotVisible {
                            scratch.touched.push(key);
                        }
                        scratch.alloc_requests[key] = Some(req);
                    }
                }
            }
        }
    }
    // a block displaced once may win its slot back later; keep one copy
    scratch.overflow.sort_by_key(|b| (b.x, b.y, b.z));
    scratch.overflow.dedup();
}

/// Allocates every requested block, in ascending entry order, then the
/// displaced requests. Swapped-out entries hit by the depth band are
/// reactivated with a fresh block. Returns the reactivated entries.
pub fn perform_allocations<V: Voxel>(
    volume: &mut HashVolume<V>,
    scratch: &mut AllocationScratch,
    stats: &mut AllocationStats,
) -> Vec<usize> {
    let mut reactivated = Vec::new();
    scratch.touched.sort_unstable();
    scratch.touched.dedup();
    let touched = std::mem::take(&mut scratch.touched);
    for &key in &touched {
        if let Some(req) = scratch.alloc_requests[key] {
            stats.requested += 1;
            match volume.allocate(req.target, req.block) {
                Ok((entry, _)) => {
                    stats.allocated += 1;
                    if scratch.visibility[entry] == Visibility::NotVisible && entry != key {
                        scratch.touched.push(entry);
                    }
                    scratch.visibility[entry] = Visibility::Visible;
                }
                Err(e) => {
                    stats.failed += 1;
                    log::debug!("allocation of block {:?} failed: {e}", req.block);
                }
            }
        }
        if scratch.visibility[key] == Visibility::SwappedOutHit {
            match volume.reactivate(key) {
                Ok(_) => {
                    stats.reactivated += 1;
                    reactivated.push(key);
                    scratch.visibility[key] = Visibility::Visible;
                }
                Err(e) => {
                    stats.failed += 1;
                    log::debug!("reactivation of entry {key} failed: {e}");
                }
            }
        }
    }
    scratch.touched.extend(touched);
    for block in std::mem::take(&mut scratch.overflow) {
        match volume.insert_block(block) {
            Ok(ins) => {
                if ins.kind != crate::index::InsertKind::Existing {
                    stats.requested += 1;
                    stats.allocated += 1;
                }
                scratch.touched.push(ins.entry);
                scratch.visibility[ins.entry] = Visibility::Visible;
            }
            Err(e) => {
                stats.requested += 1;
                stats.failed += 1;
                log::debug!("allocation of block {block:?} failed: {e}");
            }
        }
    }
    reactivated
}

/// Collects, in ascending order, the allocated entries whose blocks lie in
/// the frustum or were hit by the depth band. With `reactivate_swapped`,
/// swapped-out entries inside the frustum get a fresh block first so they
/// keep receiving observations; they are appended to `reactivated`.
pub fn build_visible_list<V: Voxel>(
    volume: &mut HashVolume<V>,
    pose: &Pose,
    intr: &Intrinsics,
    frustum: &Frustum,
    reactivate_swapped: bool,
    scratch: &mut AllocationScratch,
    stats: &mut AllocationStats,
    reactivated: &mut Vec<usize>,
) {
    let vs = volume.voxel_size() as f64;
    let entries = volume.table().entries();
    let candidates: Vec<(usize, bool)> = entries
        .par_iter()
        .enumerate()
        .filter_map(|(i, e)| {
            let considered = e.is_allocated() || (reactivate_swapped && e.is_swapped_out());
            if !considered {
                return None;
            }
            let visible = (e.is_allocated() && scratch.visibility[i] == Visibility::Visible)
                || block_in_frustum(e.block_pos(), vs, pose, intr, frustum);
            visible.then_some((i, e.is_swapped_out()))
        })
        .collect();
    scratch.visible_list.clear();
    for (entry, swapped) in candidates {
        if swapped {
            match volume.reactivate(entry) {
                Ok(_) => {
                    stats.reactivated += 1;
                    reactivated.push(entry);
                }
                Err(e) => {
                    stats.failed += 1;
                    log::debug!("reactivation of entry {entry} failed: {e}");
                    continue;
                }
            }
        }
        scratch.visible_list.push(entry);
    }
    stats.visible = scratch.visible_list.len();
}

/// The whole stage: mark, allocate, build the visible list. Returns the
/// stage statistics and the entries that were reactivated.
pub fn allocate_frame<V: Voxel>(
    volume: &mut HashVolume<V>,
    depth: &Image2D<f32>,
    pose: &Pose,
    intr: &Intrinsics,
    params: &SceneParams,
    frustum: &Frustum,
    reactivate_swapped: bool,
    scratch: &mut AllocationScratch,
) -> (AllocationStats, Vec<usize>) {
    let mut stats = AllocationStats::default();
    mark_blocks(volume.table(), depth, pose, intr, params, scratch);
    let mut reactivated = perform_allocations(volume, scratch, &mut stats);
    build_visible_list(volume, pose, intr, frustum, reactivate_swapped, scratch, &mut stats, &mut reactivated);
    (stats, reactivated)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::index::HashConfig;
    use crate::voxel::VoxelS;
    use proptest::prelude::*;

    /// Parameter interval of the segment inside the cell, if any. With
    /// `strict`, only the open interior counts.
    fn cell_interval(a: &Vector3<f64>, b: &Vector3<f64>, cell: Vector3<i32>, strict: bool) -> Option<(f64, f64)> {
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for k in 0..3 {
            let lo = cell[k] as f64;
            let hi = lo + 1.0;
            let d = b[k] - a[k];
            if d == 0.0 {
                let outside = if strict { a[k] <= lo || a[k] >= hi } else { a[k] < lo || a[k] > hi };
                if outside {
                    return None;
                }
            } else {
                let (mut ta, mut tb) = ((lo - a[k]) / d, (hi - a[k]) / d);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
            }
        }
        let len = (b - a).norm();
        let ok = if strict {
            // positive-length crossing, or a degenerate segment strictly inside
            (t1 - t0) * len > 1e-7 || (len == 0.0 && t0 <= t1)
        } else {
            t0 <= t1 + 1e-9
        };
        ok.then_some((t0, t1))
    }

    fn brute_force(a: &Vector3<f64>, b: &Vector3<f64>) -> (BTreeSet<[i32; 3]>, BTreeSet<[i32; 3]>) {
        let lo = a.inf(b).map(|c| c.floor() as i32 - 1);
        let hi = a.sup(b).map(|c| c.floor() as i32 + 1);
        let (mut open, mut closed) = (BTreeSet::new(), BTreeSet::new());
        for x in lo.x..=hi.x {
            for y in lo.y..=hi.y {
                for z in lo.z..=hi.z {
                    let c = Vector3::new(x, y, z);
                    if cell_interval(a, b, c, false).is_some() {
                        closed.insert([x, y, z]);
                    }
                    if cell_interval(a, b, c, true).is_some() {
                        open.insert([x, y, z]);
                    }
                }
            }
        }
        (open, closed)
    }

    proptest! {
        #[test]
        fn dda_matches_brute_force(a in prop::array::uniform3(-6.0f64..6.0), b in prop::array::uniform3(-6.0f64..6.0)) {
            let (a, b) = (Vector3::from(a), Vector3::from(b));
            let mut visited = Vec::new();
            traverse_segment(&a, &b, |c| visited.push([c.x, c.y, c.z]));
            let set: BTreeSet<_> = visited.iter().copied().collect();
            prop_assert_eq!(set.len(), visited.len(), "cell visited twice");
            let (open, closed) = brute_force(&a, &b);
            prop_assert!(open.is_subset(&set), "missed {:?}", open.difference(&set).collect::<Vec<_>>());
            prop_assert!(set.is_subset(&closed), "extra {:?}", set.difference(&closed).collect::<Vec<_>>());
            prop_assert_eq!(visited.first().copied(), Some(a.map(|c| c.floor() as i32).into()));
            prop_assert_eq!(visited.last().copied(), Some(b.map(|c| c.floor() as i32).into()));
        }

        #[test]
        fn dda_axis_aligned_and_grid_points(a in prop::array::uniform3(-4i32..4), b in prop::array::uniform3(-4i32..4)) {
            let (a, b) = (Vector3::from(a).map(|c| c as f64), Vector3::from(b).map(|c| c as f64));
            let mut visited = BTreeSet::new();
            traverse_segment(&a, &b, |c| { visited.insert([c.x, c.y, c.z]); });
            let (open, closed) = brute_force(&a, &b);
            prop_assert!(open.is_subset(&visited));
            prop_assert!(visited.is_subset(&closed));
        }
    }

    fn small_volume() -> HashVolume<VoxelS> {
        HashVolume::new(
            HashConfig {
                bucket_count: 1 << 12,
                bucket_size: 2,
                excess_count: 1 << 12,
                block_count: 1 << 14,
            },
            0.004,
        )
    }

    fn intr() -> Intrinsics {
        Intrinsics::new(40.0, 40.0, 20.0, 15.0, 40, 30).unwrap()
    }

    #[test]
    fn invalid_depth_allocates_nothing() {
        let mut vol = small_volume();
        let mut scratch = AllocationScratch::new(vol.table().config().entry_count());
        let depth = Image2D::new(40, 30, 0.0f32);
        let (stats, _) = allocate_frame(
            &mut vol,
            &depth,
            &Pose::identity(),
            &intr(),
            &SceneParams::default(),
            &Frustum::default(),
            false,
            &mut scratch,
        );
        assert_eq!(stats, AllocationStats::default());
        assert!(scratch.visible_list.is_empty());
    }

    #[test]
    fn single_pixel_inside_one_block() {
        let vol = small_volume();
        let mut scratch = AllocationScratch::new(vol.table().config().entry_count());
        let mut depth = Image2D::new(40, 30, 0.0f32);
        // centre pixel ray is the optical axis; block z range [1.024, 1.056)
        depth.set(20, 15, 1.04);
        let params = SceneParams {
            mu: 0.008,
            ..SceneParams::default()
        };
        mark_blocks(vol.table(), &depth, &Pose::identity(), &intr(), &params, &mut scratch);
        let requested: Vec<_> = scratch.alloc_requests.iter().flatten().map(|r| r.block).collect();
        assert_eq!(requested, vec![Vector3::new(0, 0, 32)]);
    }

    fn sloped_depth() -> Image2D<f32> {
        Image2D::from_fn(40, 30, |x, y| if (x + y) % 7 == 0 { 0.0 } else { 0.8 + 0.01 * x as f32 + 0.004 * y as f32 })
    }

    #[test]
    fn band_is_covered_and_stage_is_fixed_point() {
        let mut vol = small_volume();
        let mut scratch = AllocationScratch::new(vol.table().config().entry_count());
        let depth = sloped_depth();
        let pose = Pose::from_axis_angle(Vector3::new(0.1, -0.2, 0.05), Vector3::new(0.05, -0.02, 0.1));
        let params = SceneParams::default();
        let (stats, _) = allocate_frame(&mut vol, &depth, &pose, &intr(), &params, &Frustum::default(), false, &mut scratch);
        assert!(stats.allocated > 0);
        assert_eq!(stats.failed, 0);
        assert_eq!(stats.allocated, vol.table().allocated_count());

        // oracle: dense sampling of each band segment
        let inv = pose.inverse();
        for y in 0..30 {
            for x in 0..40 {
                let d = *depth.get(x, y) as f64;
                if d <= 0.0 {
                    continue;
                }
                let ray = intr().ray(x as f64, y as f64);
                for s in 0..=200 {
                    let z = d - params.mu as f64 + 2.0 * params.mu as f64 * s as f64 / 200.0;
                    let p = inv.transform_point(&(ray * z));
                    let block = crate::index::world_to_block(&p, params.voxel_size as f64);
                    assert!(vol.table().find_allocated(block).is_some(), "block {block:?} missing");
                }
            }
        }

        let (again, _) = allocate_frame(&mut vol, &depth, &pose, &intr(), &params, &Frustum::default(), false, &mut scratch);
        assert_eq!(again.allocated, 0);
        assert_eq!(again.requested, 0);
        assert_eq!(again.visible, stats.visible);
        vol.table().check_consistency().unwrap();
    }

    #[test]
    fn colliding_requests_in_one_frame_are_all_allocated() {
        // a single bucket: every request competes for the same entry
        let mut vol = HashVolume::<VoxelS>::new(
            HashConfig {
                bucket_count: 1,
                bucket_size: 2,
                excess_count: 4096,
                block_count: 4096,
            },
            0.004,
        );
        let mut scratch = AllocationScratch::new(vol.table().config().entry_count());
        let (stats, _) = allocate_frame(
            &mut vol,
            &sloped_depth(),
            &Pose::identity(),
            &intr(),
            &SceneParams::default(),
            &Frustum::default(),
            false,
            &mut scratch,
        );
        assert!(stats.allocated > 10);
        let (again, _) = allocate_frame(
            &mut vol,
            &sloped_depth(),
            &Pose::identity(),
            &intr(),
            &SceneParams::default(),
            &Frustum::default(),
            false,
            &mut scratch,
        );
        assert_eq!(again.allocated, 0);
        vol.table().check_consistency().unwrap();
    }

    #[test]
    fn frustum_examples() {
        let i = intr();
        let f = Frustum::default();
        // block centred on the optical axis at 1 m: x,y in [-16, 16) mm
        let vs = 0.004;
        assert!(block_in_frustum(Vector3::new(-1, -1, 31), vs, &Pose::identity(), &i, &f));
        assert!(!block_in_frustum(Vector3::new(0, 0, -40), vs, &Pose::identity(), &i, &f));
        assert!(!block_in_frustum(Vector3::new(200, 0, 31), vs, &Pose::identity(), &i, &f));
        assert!(!block_in_frustum(Vector3::new(0, 0, 400), vs, &Pose::identity(), &i, &f));
    }

    #[test]
    fn visible_list_order_and_contents() {
        let mut vol = small_volume();
        let mut scratch = AllocationScratch::new(vol.table().config().entry_count());
        let mut stats = AllocationStats::default();
        let mut re = vec![];
        build_visible_list(&mut vol, &Pose::identity(), &intr(), &Frustum::default(), false, &mut scratch, &mut stats, &mut re);
        assert!(scratch.visible_list.is_empty());
        vol.insert_block(Vector3::new(-1, -1, 31)).unwrap();
        vol.insert_block(Vector3::new(0, 0, -31)).unwrap();
        vol.insert_block(Vector3::new(3, 2, 40)).unwrap();
        build_visible_list(&mut vol, &Pose::identity(), &intr(), &Frustum::default(), false, &mut scratch, &mut stats, &mut re);
        assert_eq!(scratch.visible_list.len(), 2);
        assert!(scratch.visible_list.windows(2).all(|w| w[0] < w[1]));
    }
}
