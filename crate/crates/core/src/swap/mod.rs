//! Paging of voxel blocks between the bounded voxel block array and a host
//! store, with a fixed per-frame transfer budget in each direction.
//!
//! A block leaves the device once it is outside the enlarged frustum. Its
//! hash entry stays in the table marked swapped out. When such an entry
//! comes back into view it is requested for swap-in; if the allocation
//! stage already gave it a fresh block (because new depth landed there),
//! the host copy is fused with whatever was integrated in the meantime.

mod store;

pub use store::{FileStore, HostStore, MemoryStore, HEADER_LEN, STORE_MAGIC, STORE_VERSION};

use rayon::prelude::*;

use crate::allocation::{block_in_frustum, Frustum};
use crate::error::SwapError;
use crate::index::{HashVolume, VolumeRead, BLOCK_VOXELS};
use crate::math::{Intrinsics, Pose};
use crate::voxel::Voxel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[repr(u8)]
pub enum SwapState {
    /// Not on the device, or on the device with no host copy pending.
    #[default]
    Inactive = 0,
    /// Host data wanted on the device; the entry has no block yet.
    NeedsSwapIn = 1,
    /// The entry has a device block and host data still to be fused in.
    InTransfer = 2,
    Active = 3,
    /// Chosen for swap-out this frame.
    NeedsSwapOut = 4,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwapSettings {
    /// Blocks per frame per direction.
    pub budget: usize,
    /// Frustum used for swap decisions: the live one with a wider margin.
    pub frustum: Frustum,
    pub max_w: u8,
}

impl Default for SwapSettings {
    fn default() -> Self {
        Self {
            budget: 100,
            frustum: Frustum::default().with_margin(64.0),
            max_w: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SwapMetrics {
    pub swapped_in: usize,
    pub swapped_out: usize,
    /// Swap-in requests still waiting after this frame.
    pub pending_in: usize,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

/// Host store plus per-entry swap bookkeeping.
pub struct GlobalCache<V: Voxel> {
    store: Box<dyn HostStore<V>>,
    has_stored_data: Vec<bool>,
    states: Vec<SwapState>,
    settings: SwapSettings,
    transfer: Vec<V>,
    totals: SwapMetrics,
}

impl<V: Voxel> GlobalCache<V> {
    pub fn new(entry_count: usize, settings: SwapSettings, store: Box<dyn HostStore<V>>) -> Self {
        assert!(settings.budget > 0, "swap budget must be positive");
        Self {
            store,
            has_stored_data: vec![false; entry_count],
            states: vec![SwapState::Inactive; entry_count],
            settings,
            transfer: vec![V::default(); settings.budget * BLOCK_VOXELS],
            totals: SwapMetrics::default(),
        }
    }

    pub fn in_memory(entry_count: usize, settings: SwapSettings) -> Self {
        Self::new(entry_count, settings, Box::new(MemoryStore::new()))
    }

    pub fn settings(&self) -> &SwapSettings {
        &self.settings
    }

    pub fn has_stored_data(&self, entry: usize) -> bool {
        self.has_stored_data[entry]
    }

    pub fn state(&self, entry: usize) -> SwapState {
        self.states[entry]
    }

    pub fn stored_count(&self) -> usize {
        self.has_stored_data.iter().filter(|&&s| s).count()
    }

    /// Cumulative transfers since creation.
    pub fn totals(&self) -> SwapMetrics {
        self.totals
    }

    fn record_len() -> u64 {
        (4 + BLOCK_VOXELS * V::ENCODED_LEN) as u64
    }

    /// Re-derives swap requests from the entries inside the enlarged
    /// frustum. Requests that fell out of view are dropped.
    pub fn request_swap_ins(&mut self, volume: &HashVolume<V>, in_view: &[bool]) {
        let entries = volume.table().entries();
        for (i, e) in entries.iter().enumerate() {
            if !self.has_stored_data[i] {
                if e.is_allocated() && self.states[i] != SwapState::NeedsSwapOut {
                    self.states[i] = SwapState::Active;
                }
                continue;
            }
            self.states[i] = if e.is_allocated() {
                SwapState::InTransfer
            } else if in_view[i] {
                SwapState::NeedsSwapIn
            } else {
                SwapState::Inactive
            };
        }
    }

    /// Brings up to `budget` requested blocks onto the device, lowest entry
    /// first. Entries with a device block are fused with their host copy;
    /// the rest get a fresh block first. When the block array is full the
    /// remaining requests wait for a later frame.
    pub fn execute_swap_in(&mut self, volume: &mut HashVolume<V>) -> Result<SwapMetrics, SwapError> {
        let mut metrics = SwapMetrics::default();
        let candidates: Vec<usize> = (0..self.states.len())
            .filter(|&i| matches!(self.states[i], SwapState::InTransfer | SwapState::NeedsSwapIn))
            .collect();
        let mut staged = Vec::with_capacity(self.settings.budget);
        for &entry in &candidates {
            if staged.len() == self.settings.budget {
                break;
            }
            if self.states[entry] == SwapState::NeedsSwapIn {
                if let Err(e) = volume.reactivate(entry) {
                    log::debug!("swap-in of entry {entry} deferred: {e}");
                    break;
                }
                self.states[entry] = SwapState::InTransfer;
            }
            staged.push(entry);
        }
        // sequential host reads into the transfer buffer
        for (k, &entry) in staged.iter().enumerate() {
            self.store
                .read_block(entry, &mut self.transfer[k * BLOCK_VOXELS..(k + 1) * BLOCK_VOXELS])?;
        }
        let max_w = self.settings.max_w;
        for (k, &entry) in staged.iter().enumerate() {
            let host = &self.transfer[k * BLOCK_VOXELS..(k + 1) * BLOCK_VOXELS];
            let active = volume.block_of_entry_mut(entry).expect("staged entry has a block");
            active
                .par_iter_mut()
                .zip(host.par_iter())
                .for_each(|(a, h)| *a = V::fuse(h, a, max_w));
            self.has_stored_data[entry] = false;
            self.states[entry] = SwapState::Active;
        }
        metrics.swapped_in = staged.len();
        metrics.bytes_in = staged.len() as u64 * Self::record_len();
        metrics.pending_in = self
            .states
            .iter()
            .filter(|s| matches!(s, SwapState::InTransfer | SwapState::NeedsSwapIn))
            .count();
        Ok(metrics)
    }

    /// Marks up to `budget` device blocks outside the enlarged frustum and
    /// not in this frame's visible list, lowest entry first.
    pub fn request_swap_outs(&mut self, volume: &HashVolume<V>, in_view: &[bool], visible: &[usize]) {
        let mut is_visible = vec![false; self.states.len()];
        for &v in visible {
            is_visible[v] = true;
        }
        let mut marked = 0;
        for i in volume.table().allocated_entries() {
            if marked == self.settings.budget {
                break;
            }
            if self.states[i] == SwapState::Active && !in_view[i] && !is_visible[i] {
                self.states[i] = SwapState::NeedsSwapOut;
                marked += 1;
            }
        }
    }

    /// Copies the marked blocks to the host store and frees their slots.
    pub fn execute_swap_out(&mut self, volume: &mut HashVolume<V>) -> Result<SwapMetrics, SwapError> {
        let staged: Vec<usize> = (0..self.states.len())
            .filter(|&i| self.states[i] == SwapState::NeedsSwapOut)
            .collect();
        debug_assert!(staged.len() <= self.settings.budget);
        {
            let vba = volume.vba();
            let table = volume.table();
            self.transfer[..staged.len() * BLOCK_VOXELS]
                .par_chunks_mut(BLOCK_VOXELS)
                .zip(staged.par_iter())
                .for_each(|(dst, &entry)| dst.copy_from_slice(vba.block(table.entry(entry).block_state)));
        }
        for (k, &entry) in staged.iter().enumerate() {
            self.store
                .write_block(entry, &self.transfer[k * BLOCK_VOXELS..(k + 1) * BLOCK_VOXELS])?;
        }
        self.store.flush()?;
        let (table, _) = volume.parts_mut();
        for &entry in &staged {
            table.swap_out(entry);
            self.has_stored_data[entry] = true;
            self.states[entry] = SwapState::Inactive;
        }
        Ok(SwapMetrics {
            swapped_out: staged.len(),
            bytes_out: staged.len() as u64 * Self::record_len(),
            ..Default::default()
        })
    }

    /// Which entries lie in the enlarged frustum.
    pub fn entries_in_view(&self, volume: &HashVolume<V>, pose: &Pose, intr: &Intrinsics) -> Vec<bool> {
        let vs = volume.voxel_size() as f64;
        let frustum = self.settings.frustum;
        volume
            .table()
            .entries()
            .par_iter()
            .map(|e| e.is_used() && block_in_frustum(e.block_pos(), vs, pose, intr, &frustum))
            .collect()
    }

    /// One frame of swapping, after integration: swap in, then swap out.
    pub fn process_frame(
        &mut self,
        volume: &mut HashVolume<V>,
        pose: &Pose,
        intr: &Intrinsics,
        visible: &[usize],
    ) -> Result<SwapMetrics, SwapError> {
        let in_view = self.entries_in_view(volume, pose, intr);
        self.request_swap_ins(volume, &in_view);
        let swap_in = self.execute_swap_in(volume)?;
        self.request_swap_outs(volume, &in_view, visible);
        let swap_out = self.execute_swap_out(volume)?;
        let metrics = SwapMetrics {
            swapped_out: swap_out.swapped_out,
            bytes_out: swap_out.bytes_out,
            ..swap_in
        };
        self.accumulate(&metrics);
        Ok(metrics)
    }

    /// Brings every stored block back onto the device, `budget` blocks per
    /// round. Returns the per-round metrics. Fails if the block array
    /// cannot hold them all.
    pub fn flush_all(&mut self, volume: &mut HashVolume<V>) -> Result<Vec<SwapMetrics>, SwapError> {
        let mut rounds = Vec::new();
        while self.has_stored_data.iter().any(|&s| s) {
            for i in 0..self.states.len() {
                if self.has_stored_data[i] {
                    self.states[i] = if volume.table().entry(i).is_allocated() {
                        SwapState::InTransfer
                    } else {
                        SwapState::NeedsSwapIn
                    };
                }
            }
            let m = self.execute_swap_in(volume)?;
            if m.swapped_in == 0 {
                return Err(SwapError::Index(crate::error::IndexError::VolumeFull));
            }
            self.accumulate(&m);
            rounds.push(m);
        }
        Ok(rounds)
    }

    fn accumulate(&mut self, m: &SwapMetrics) {
        self.totals.swapped_in += m.swapped_in;
        self.totals.swapped_out += m.swapped_out;
        self.totals.bytes_in += m.bytes_in;
        self.totals.bytes_out += m.bytes_out;
        self.totals.pending_in = m.pending_in;
    }

    /// Checks the pairing of entry state, host data and swap state.
    pub fn check_invariants(&self, volume: &HashVolume<V>) -> Result<(), String> {
        for (i, e) in volume.table().entries().iter().enumerate() {
            let (state, stored) = (self.states[i], self.has_stored_data[i]);
            let bad = if e.is_allocated() {
                state == SwapState::NeedsSwapIn || (stored && !matches!(state, SwapState::InTransfer))
            } else if e.is_swapped_out() {
                !stored || !matches!(state, SwapState::Inactive | SwapState::NeedsSwapIn)
            } else {
                stored || state != SwapState::Inactive
            };
            if bad {
                return Err(format!(
                    "entry {i}: block_state {} with state {state:?}, stored {stored}",
                    e.block_state
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::HashConfig;
    use crate::voxel::{VoxelS, VoxelSRgb};
    use nalgebra::Vector3;

    fn small_config(blocks: usize) -> HashConfig {
        HashConfig {
            bucket_count: 1 << 10,
            bucket_size: 2,
            excess_count: 1 << 8,
            block_count: blocks,
        }
    }

    fn camera() -> (Pose, Intrinsics) {
        (Pose::identity(), Intrinsics::new(50.0, 50.0, 31.5, 23.5, 64, 48).unwrap())
    }

    fn fill(volume: &mut HashVolume<VoxelSRgb>, entry: usize, seed: i16) {
        for (k, v) in volume.block_of_entry_mut(entry).unwrap().iter_mut().enumerate() {
            v.sdf = seed.wrapping_mul(31).wrapping_add(k as i16);
            v.w_depth = (k % 50 + 1) as u8;
            v.clr = [k as u8, seed as u8, 3];
            v.w_color = 2;
        }
    }

    #[test]
    fn roundtrip_of_untouched_block_is_exact() {
        let (pose, intr) = camera();
        let mut vol = HashVolume::<VoxelSRgb>::new(small_config(16), 0.01);
        // one block in front of the camera, one far behind it
        let front = vol.insert_block(Vector3::new(0, 0, 3)).unwrap().entry;
        let back = vol.insert_block(Vector3::new(0, 0, -20)).unwrap().entry;
        fill(&mut vol, front, 1);
        fill(&mut vol, back, 2);
        let before = vol.block_of_entry(back).unwrap().to_vec();
        let mut cache = GlobalCache::in_memory(vol.table().entries().len(), SwapSettings::default());
        let m = cache.process_frame(&mut vol, &pose, &intr, &[front]).unwrap();
        assert_eq!((m.swapped_in, m.swapped_out), (0, 1));
        assert!(vol.table().entry(back).is_swapped_out());
        assert!(vol.table().entry(front).is_allocated());
        assert_eq!(vol.table().free_block_count(), 15);
        cache.check_invariants(&vol).unwrap();

        // turn around: the stored block comes back unchanged
        let turned = Pose::from_axis_angle(Vector3::new(0.0, std::f64::consts::PI, 0.0), Vector3::zeros());
        let m = cache.process_frame(&mut vol, &turned, &intr, &[]).unwrap();
        assert_eq!(m.swapped_in, 1);
        assert_eq!(vol.block_of_entry(back).unwrap(), &before[..]);
        assert!(vol.table().entry(front).is_swapped_out());
        cache.check_invariants(&vol).unwrap();
    }

    #[test]
    fn visible_blocks_stay() {
        let (pose, intr) = camera();
        let mut vol = HashVolume::<VoxelS>::new(small_config(16), 0.01);
        let far = vol.insert_block(Vector3::new(0, 0, -20)).unwrap().entry;
        let mut cache = GlobalCache::in_memory(vol.table().entries().len(), SwapSettings::default());
        let m = cache.process_frame(&mut vol, &pose, &intr, &[far]).unwrap();
        assert_eq!(m.swapped_out, 0);
        assert!(vol.table().entry(far).is_allocated());
    }

    #[test]
    fn secondary_integration_fuses_weights() {
        let mut vol = HashVolume::<VoxelS>::new(small_config(4), 0.01);
        let e = vol.insert_block(Vector3::new(5, 5, 5)).unwrap().entry;
        for v in vol.block_of_entry_mut(e).unwrap() {
            v.sdf = 32767;
            v.w_depth = 2;
        }
        let mut cache = GlobalCache::in_memory(vol.table().entries().len(), SwapSettings::default());
        let none = vec![false; vol.table().entries().len()];
        cache.request_swap_outs(&vol, &none, &[]);
        // nothing active yet until requests were derived
        assert_eq!(cache.execute_swap_out(&mut vol).unwrap().swapped_out, 0);
        cache.request_swap_ins(&vol, &none);
        cache.request_swap_outs(&vol, &none, &[]);
        assert_eq!(cache.execute_swap_out(&mut vol).unwrap().swapped_out, 1);
        // new data lands in a fresh block before the host copy returns
        vol.reactivate(e).unwrap();
        for v in vol.block_of_entry_mut(e).unwrap() {
            v.sdf = 0;
            v.w_depth = 1;
        }
        cache.request_swap_ins(&vol, &none);
        assert_eq!(cache.state(e), SwapState::InTransfer);
        cache.check_invariants(&vol).unwrap();
        assert_eq!(cache.execute_swap_in(&mut vol).unwrap().swapped_in, 1);
        let v = vol.block_of_entry(e).unwrap()[0];
        assert_eq!(v.w_depth, 3);
        assert_eq!(v.sdf, 21844); // 2/3 of full scale, truncated like an update
        cache.check_invariants(&vol).unwrap();
    }

    #[test]
    fn budget_spreads_requests() {
        let mut vol = HashVolume::<VoxelS>::new(small_config(8), 0.01);
        let entries: Vec<usize> = (0..3).map(|i| vol.insert_block(Vector3::new(i, 0, 0)).unwrap().entry).collect();
        let settings = SwapSettings {
            budget: 1,
            ..Default::default()
        };
        let n = vol.table().entries().len();
        let mut cache = GlobalCache::in_memory(n, settings);
        let none = vec![false; n];
        cache.request_swap_ins(&vol, &none);
        for _ in 0..3 {
            cache.request_swap_outs(&vol, &none, &[]);
            assert_eq!(cache.execute_swap_out(&mut vol).unwrap().swapped_out, 1);
        }
        assert_eq!(cache.stored_count(), 3);
        let all = vec![true; n];
        for round in 0..3 {
            cache.request_swap_ins(&vol, &all);
            let m = cache.execute_swap_in(&mut vol).unwrap();
            assert_eq!(m.swapped_in, 1);
            assert_eq!(m.pending_in, 2 - round);
            cache.check_invariants(&vol).unwrap();
        }
        assert!(entries.iter().all(|&e| vol.table().entry(e).is_allocated()));
    }

    #[test]
    fn stale_requests_are_dropped_and_full_volume_defers() {
        let mut vol = HashVolume::<VoxelS>::new(small_config(1), 0.01);
        let a = vol.insert_block(Vector3::new(0, 0, 0)).unwrap().entry;
        let n = vol.table().entries().len();
        let mut cache = GlobalCache::in_memory(n, SwapSettings::default());
        let none = vec![false; n];
        cache.request_swap_ins(&vol, &none);
        cache.request_swap_outs(&vol, &none, &[]);
        cache.execute_swap_out(&mut vol).unwrap();
        let b = vol.insert_block(Vector3::new(9, 9, 9)).unwrap().entry;
        let mut view = vec![false; n];
        view[a] = true;
        cache.request_swap_ins(&vol, &view);
        assert_eq!(cache.state(a), SwapState::NeedsSwapIn);
        // no free block: the request waits
        let m = cache.execute_swap_in(&mut vol).unwrap();
        assert_eq!((m.swapped_in, m.pending_in), (0, 1));
        assert!(vol.table().entry(b).is_allocated());
        cache.check_invariants(&vol).unwrap();
        // out of view: dropped
        cache.request_swap_ins(&vol, &none);
        assert_eq!(cache.state(a), SwapState::Inactive);
        assert!(cache.has_stored_data(a));
        cache.check_invariants(&vol).unwrap();
    }

    #[test]
    fn file_store_backs_the_cache() {
        let dir = tempfile::tempdir().unwrap();
        let mut vol = HashVolume::<VoxelSRgb>::new(small_config(4), 0.01);
        let e = vol.insert_block(Vector3::new(1, 2, 3)).unwrap().entry;
        fill(&mut vol, e, 5);
        let before = vol.block_of_entry(e).unwrap().to_vec();
        let n = vol.table().entries().len();
        let store = FileStore::<VoxelSRgb>::create(&dir.path().join("h.bin"), n).unwrap();
        let mut cache = GlobalCache::new(n, SwapSettings::default(), Box::new(store));
        let none = vec![false; n];
        cache.request_swap_ins(&vol, &none);
        cache.request_swap_outs(&vol, &none, &[]);
        let m = cache.execute_swap_out(&mut vol).unwrap();
        assert_eq!(m.bytes_out, FileStore::<VoxelSRgb>::record_len() as u64);
        cache.flush_all(&mut vol).unwrap();
        assert_eq!(vol.block_of_entry(e).unwrap(), &before[..]);
        assert_eq!(cache.totals().swapped_in, 1);
    }
}
