//! Voxel block hashing.
//!
//! The hash table is one contiguous array of [`HashEntry`]: `bucket_count`
//! ordered buckets of `bucket_size` entries, followed by `excess_count`
//! unordered excess entries. A bucket that fills up continues into a linked
//! list inside the excess part; the list head hangs off the last entry of the
//! bucket. Entries are never removed. Swapping out a block only marks its
//! entry as [`SWAPPED_OUT`].

use std::sync::atomic::{AtomicI32, Ordering};

use nalgebra::Vector3;

use super::{voxel_to_block, VolumeRead, BLOCK_SIDE, BLOCK_VOXELS};
use crate::error::IndexError;
use crate::voxel::Voxel;

/// `block_state` of an entry whose block lives only in host storage.
pub const SWAPPED_OUT: i32 = -1;
/// `block_state` of an entry that has never been used.
pub const UNALLOCATED: i32 = -2;

/// Bucket index of a block position.
///
/// Coordinates are reinterpreted as unsigned 32-bit values and multiplied
/// with wrap-around before XOR-ing.
#[inline]
pub fn hash_index(block: Vector3<i32>, hash_mask: u32) -> usize {
    let x = (block.x as u32).wrapping_mul(73_856_093);
    let y = (block.y as u32).wrapping_mul(19_349_669);
    let z = (block.z as u32).wrapping_mul(83_492_791);
    ((x ^ y ^ z) & hash_mask) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEntry {
    /// Block position in block units.
    pub pos: [i16; 3],
    /// Excess list link: `offset - 1` is the next excess index, `<= 0` ends the list.
    pub offset: i32,
    /// `>= 0`: slot in the voxel block array. [`SWAPPED_OUT`] or [`UNALLOCATED`] otherwise.
    pub block_state: i32,
}

impl HashEntry {
    pub const EMPTY: HashEntry = HashEntry {
        pos: [0; 3],
        offset: 0,
        block_state: UNALLOCATED,
    };

    #[inline]
    pub fn is_allocated(&self) -> bool {
        self.block_state >= 0
    }

    #[inline]
    pub fn is_swapped_out(&self) -> bool {
        self.block_state == SWAPPED_OUT
    }

    /// Allocated or swapped out: the entry owns its position.
    #[inline]
    pub fn is_used(&self) -> bool {
        self.block_state >= SWAPPED_OUT
    }

    #[inline]
    pub fn block_pos(&self) -> Vector3<i32> {
        Vector3::new(self.pos[0] as i32, self.pos[1] as i32, self.pos[2] as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashConfig {
    /// Number of ordered buckets; must be a power of two.
    pub bucket_count: usize,
    pub bucket_size: usize,
    pub excess_count: usize,
    /// Capacity of the voxel block array.
    pub block_count: usize,
}

impl Default for HashConfig {
    fn default() -> Self {
        Self {
            bucket_count: 1 << 20,
            bucket_size: 2,
            excess_count: 1 << 17,
            block_count: 1 << 18,
        }
    }
}

impl HashConfig {
    pub fn hash_mask(&self) -> u32 {
        (self.bucket_count - 1) as u32
    }

    pub fn ordered_count(&self) -> usize {
        self.bucket_count * self.bucket_size
    }

    pub fn entry_count(&self) -> usize {
        self.ordered_count() + self.excess_count
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.bucket_count.is_power_of_two() {
            return Err(format!("bucket count {} is not a power of two", self.bucket_count));
        }
        if self.bucket_size == 0 || self.block_count == 0 {
            return Err("bucket size and block count must be positive".into());
        }
        if self.entry_count() > i32::MAX as usize || self.block_count > i32::MAX as usize {
            return Err("hash table too large".into());
        }
        Ok(())
    }
}

/// Where a missing block would be inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocTarget {
    /// Free slot in the ordered bucket.
    Ordered(usize),
    /// Append to the excess list after this (tail) entry.
    Excess(usize),
}

impl AllocTarget {
    /// Entry index the request is keyed on.
    pub fn key(&self) -> usize {
        match *self {
            AllocTarget::Ordered(i) | AllocTarget::Excess(i) => i,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    /// An entry owns the position (allocated or swapped out).
    Present(usize),
    Vacant(AllocTarget),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertKind {
    /// Already allocated; nothing changed.
    Existing,
    /// New entry written.
    New,
    /// A swapped-out entry received a fresh block.
    Reactivated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inserted {
    pub entry: usize,
    pub slot: i32,
    pub kind: InsertKind,
}

fn to_pos(block: Vector3<i32>) -> Result<[i16; 3], IndexError> {
    let conv = |c: i32| i16::try_from(c).map_err(|_| IndexError::OutOfRange([block.x, block.y, block.z]));
    Ok([conv(block.x)?, conv(block.y)?, conv(block.z)?])
}

#[derive(Debug)]
pub struct HashTable {
    config: HashConfig,
    entries: Vec<HashEntry>,
    free_blocks: Vec<i32>,
    free_block_count: AtomicI32,
    free_excess: Vec<i32>,
    free_excess_count: AtomicI32,
}

impl Clone for HashTable {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            entries: self.entries.clone(),
            free_blocks: self.free_blocks.clone(),
            free_block_count: AtomicI32::new(self.free_block_count.load(Ordering::Acquire)),
            free_excess: self.free_excess.clone(),
            free_excess_count: AtomicI32::new(self.free_excess_count.load(Ordering::Acquire)),
        }
    }
}

impl HashTable {
    pub fn new(config: HashConfig) -> Self {
        config.validate().expect("invalid hash configuration");
        // Stacks pop from the end; lowest indices come out first.
        let free_blocks = (0..config.block_count as i32).rev().collect();
        let free_excess = (0..config.excess_count as i32).rev().collect();
        Self {
            config,
            entries: vec![HashEntry::EMPTY; config.entry_count()],
            free_blocks,
            free_block_count: AtomicI32::new(config.block_count as i32),
            free_excess,
            free_excess_count: AtomicI32::new(config.excess_count as i32),
        }
    }

    pub fn config(&self) -> &HashConfig {
        &self.config
    }

    pub fn entries(&self) -> &[HashEntry] {
        &self.entries
    }

    #[inline]
    pub fn entry(&self, index: usize) -> &HashEntry {
        &self.entries[index]
    }

    pub fn free_block_count(&self) -> usize {
        self.free_block_count.load(Ordering::Acquire).max(0) as usize
    }

    pub fn free_excess_count(&self) -> usize {
        self.free_excess_count.load(Ordering::Acquire).max(0) as usize
    }

    pub fn allocated_count(&self) -> usize {
        self.config.block_count - self.free_block_count()
    }

    #[inline]
    fn bucket_start(&self, block: Vector3<i32>) -> usize {
        hash_index(block, self.config.hash_mask()) * self.config.bucket_size
    }

    /// Retrieval: entry index and slot of an allocated block.
    pub fn find_allocated(&self, block: Vector3<i32>) -> Option<(usize, i32)> {
        let pos = to_pos(block).ok()?;
        let start = self.bucket_start(block);
        let mut offset_excess = -1;
        for idx in start..start + self.config.bucket_size {
            let e = &self.entries[idx];
            offset_excess = e.offset - 1;
            if e.pos == pos && e.block_state >= 0 {
                return Some((idx, e.block_state));
            }
        }
        let ordered = self.config.ordered_count();
        while offset_excess >= 0 {
            let idx = ordered + offset_excess as usize;
            let e = &self.entries[idx];
            if e.pos == pos && e.block_state >= 0 {
                return Some((idx, e.block_state));
            }
            offset_excess = e.offset - 1;
        }
        None
    }

    /// Finds the entry owning `block`, or where it would be inserted.
    pub fn probe(&self, block: Vector3<i32>) -> Result<Probe, IndexError> {
        let pos = to_pos(block)?;
        let start = self.bucket_start(block);
        let mut first_free = None;
        for idx in start..start + self.config.bucket_size {
            let e = &self.entries[idx];
            if e.is_used() {
                if e.pos == pos {
                    return Ok(Probe::Present(idx));
                }
            } else if first_free.is_none() {
                first_free = Some(idx);
            }
        }
        let ordered = self.config.ordered_count();
        let mut tail = start + self.config.bucket_size - 1;
        let mut offset_excess = self.entries[tail].offset - 1;
        while offset_excess >= 0 {
            let idx = ordered + offset_excess as usize;
            let e = &self.entries[idx];
            if e.is_used() && e.pos == pos {
                return Ok(Probe::Present(idx));
            }
            tail = idx;
            offset_excess = e.offset - 1;
        }
        Ok(Probe::Vacant(match first_free {
            Some(idx) => AllocTarget::Ordered(idx),
            None => AllocTarget::Excess(tail),
        }))
    }

    /// Pops a free voxel block slot with a single atomic decrement.
    pub fn reserve_block(&self) -> Result<i32, IndexError> {
        let prev = self.free_block_count.fetch_sub(1, Ordering::AcqRel);
        if prev <= 0 {
            self.free_block_count.fetch_add(1, Ordering::AcqRel);
            return Err(IndexError::VolumeFull);
        }
        Ok(self.free_blocks[(prev - 1) as usize])
    }

    fn reserve_excess(&self) -> Result<i32, IndexError> {
        let prev = self.free_excess_count.fetch_sub(1, Ordering::AcqRel);
        if prev <= 0 {
            self.free_excess_count.fetch_add(1, Ordering::AcqRel);
            return Err(IndexError::HashFull);
        }
        Ok(self.free_excess[(prev - 1) as usize])
    }

    /// Returns a slot to the free stack.
    pub fn release_block(&mut self, slot: i32) {
        let count = self.free_block_count.get_mut();
        self.free_blocks[*count as usize] = slot;
        *count += 1;
    }

    /// Executes an allocation decided by [`probe`](Self::probe). Fails with
    /// [`IndexError::StaleTarget`] if the target was consumed in between.
    pub fn allocate(&mut self, target: AllocTarget, block: Vector3<i32>) -> Result<(usize, i32), IndexError> {
        let pos = to_pos(block)?;
        match target {
            AllocTarget::Ordered(idx) => {
                if self.entries[idx].is_used() {
                    return Err(IndexError::StaleTarget(idx));
                }
                let slot = self.reserve_block()?;
                let e = &mut self.entries[idx];
                e.pos = pos;
                e.block_state = slot;
                Ok((idx, slot))
            }
            AllocTarget::Excess(tail) => {
                if self.entries[tail].offset > 0 {
                    return Err(IndexError::StaleTarget(tail));
                }
                let excess = self.reserve_excess()?;
                let slot = match self.reserve_block() {
                    Ok(slot) => slot,
                    Err(e) => {
                        self.free_excess_count.fetch_add(1, Ordering::AcqRel);
                        return Err(e);
                    }
                };
                let idx = self.config.ordered_count() + excess as usize;
                self.entries[idx] = HashEntry {
                    pos,
                    offset: 0,
                    block_state: slot,
                };
                self.entries[tail].offset = excess + 1;
                Ok((idx, slot))
            }
        }
    }

    /// Gives a swapped-out entry a fresh voxel block slot.
    pub fn reactivate(&mut self, entry: usize) -> Result<i32, IndexError> {
        debug_assert!(self.entries[entry].is_swapped_out());
        let slot = self.reserve_block()?;
        self.entries[entry].block_state = slot;
        Ok(slot)
    }

    /// Marks an allocated entry as swapped out and frees its slot.
    pub fn swap_out(&mut self, entry: usize) -> i32 {
        let slot = self.entries[entry].block_state;
        debug_assert!(slot >= 0);
        self.entries[entry].block_state = SWAPPED_OUT;
        self.release_block(slot);
        slot
    }

    /// Idempotent insertion.
    pub fn insert(&mut self, block: Vector3<i32>) -> Result<Inserted, IndexError> {
        match self.probe(block)? {
            Probe::Present(entry) => {
                let state = self.entries[entry].block_state;
                if state >= 0 {
                    Ok(Inserted {
                        entry,
                        slot: state,
                        kind: InsertKind::Existing,
                    })
                } else {
                    let slot = self.reactivate(entry)?;
                    Ok(Inserted {
                        entry,
                        slot,
                        kind: InsertKind::Reactivated,
                    })
                }
            }
            Probe::Vacant(target) => {
                let (entry, slot) = self.allocate(target, block)?;
                Ok(Inserted {
                    entry,
                    slot,
                    kind: InsertKind::New,
                })
            }
        }
    }

    /// Indices of allocated entries, ascending.
    pub fn allocated_entries(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().enumerate().filter(|(_, e)| e.is_allocated()).map(|(i, _)| i)
    }

    /// Full structural check; meant for tests and debugging.
    pub fn check_consistency(&self) -> Result<(), String> {
        use std::collections::HashSet;
        let mut positions = HashSet::new();
        let mut slots = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.is_used()
                && !positions.insert(e.pos) {
                    return Err(format!("duplicate position {:?} at entry {i}", e.pos));
                }
            if e.is_allocated() {
                if e.block_state as usize >= self.config.block_count {
                    return Err(format!("entry {i} points past the block array"));
                }
                if !slots.insert(e.block_state) {
                    return Err(format!("slot {} referenced twice", e.block_state));
                }
            }
        }
        let free = self.free_block_count();
        for &slot in &self.free_blocks[..free] {
            if slots.contains(&slot) {
                return Err(format!("slot {slot} is both free and referenced"));
            }
        }
        if free + slots.len() != self.config.block_count {
            return Err(format!(
                "{} free + {} referenced != {} blocks",
                free,
                slots.len(),
                self.config.block_count
            ));
        }
        // every excess list terminates and stays inside its bucket's hash
        let ordered = self.config.ordered_count();
        for bucket in 0..self.config.bucket_count {
            let mut off = self.entries[bucket * self.config.bucket_size + self.config.bucket_size - 1].offset - 1;
            let mut steps = 0;
            while off >= 0 {
                steps += 1;
                if steps > self.config.excess_count {
                    return Err(format!("cycle in excess list of bucket {bucket}"));
                }
                let e = &self.entries[ordered + off as usize];
                if hash_index(e.block_pos(), self.config.hash_mask()) != bucket {
                    return Err(format!("excess entry {} chained into wrong bucket", ordered + off as usize));
                }
                off = e.offset - 1;
            }
        }
        Ok(())
    }
}

/// Contiguous pool of 8×8×8 voxel blocks.
///
/// Storage grows on demand up to the configured capacity: slots are handed
/// out lowest first, so memory tracks the high-water mark of allocation.
#[derive(Debug, Clone)]
pub struct VoxelBlockArray<V> {
    capacity: usize,
    data: Vec<V>,
}

impl<V: Voxel> VoxelBlockArray<V> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            data: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Blocks currently backed by memory.
    pub fn materialized_blocks(&self) -> usize {
        self.data.len() / BLOCK_VOXELS
    }

    #[inline]
    pub fn block(&self, slot: i32) -> &[V] {
        let start = slot as usize * BLOCK_VOXELS;
        &self.data[start..start + BLOCK_VOXELS]
    }

    #[inline]
    pub fn block_mut(&mut self, slot: i32) -> &mut [V] {
        let start = slot as usize * BLOCK_VOXELS;
        &mut self.data[start..start + BLOCK_VOXELS]
    }

    /// Resets a slot to fresh voxels, materializing it if needed.
    pub fn reset(&mut self, slot: i32) {
        let end = (slot as usize + 1) * BLOCK_VOXELS;
        assert!(slot >= 0 && (slot as usize) < self.capacity);
        if self.data.len() < end {
            self.data.resize(end, V::default());
        } else {
            self.block_mut(slot).fill(V::default());
        }
    }

    /// All materialized voxels, block after block.
    pub fn raw_mut(&mut self) -> &mut [V] {
        &mut self.data
    }
}

/// Voxel block hash volume: the hash table plus its voxel block array.
#[derive(Debug, Clone)]
pub struct HashVolume<V> {
    table: HashTable,
    vba: VoxelBlockArray<V>,
    voxel_size: f32,
}

impl<V: Voxel> HashVolume<V> {
    pub fn new(config: HashConfig, voxel_size: f32) -> Self {
        Self {
            table: HashTable::new(config),
            vba: VoxelBlockArray::new(config.block_count),
            voxel_size,
        }
    }

    pub fn table(&self) -> &HashTable {
        &self.table
    }

    pub fn vba(&self) -> &VoxelBlockArray<V> {
        &self.vba
    }

    /// Simultaneous access for stages that read entries while writing blocks.
    pub fn parts_mut(&mut self) -> (&mut HashTable, &mut VoxelBlockArray<V>) {
        (&mut self.table, &mut self.vba)
    }

    /// Inserts a block; new and reactivated blocks start out fresh.
    pub fn insert_block(&mut self, block: Vector3<i32>) -> Result<Inserted, IndexError> {
        let ins = self.table.insert(block)?;
        if ins.kind != InsertKind::Existing {
            self.vba.reset(ins.slot);
        }
        Ok(ins)
    }

    pub fn allocate(&mut self, target: AllocTarget, block: Vector3<i32>) -> Result<(usize, i32), IndexError> {
        let (entry, slot) = self.table.allocate(target, block)?;
        self.vba.reset(slot);
        Ok((entry, slot))
    }

    pub fn reactivate(&mut self, entry: usize) -> Result<i32, IndexError> {
        let slot = self.table.reactivate(entry)?;
        self.vba.reset(slot);
        Ok(slot)
    }

    /// Voxel at `point` and whether its block was found; a miss returns a
    /// fresh voxel.
    pub fn retrieve(&self, point: Vector3<i32>) -> (V, bool) {
        match self.read_voxel(point) {
            Some(v) => (v, true),
            None => (V::default(), false),
        }
    }

    pub fn voxel_mut(&mut self, point: Vector3<i32>) -> Option<&mut V> {
        let (block, linear) = voxel_to_block(point);
        let (_, slot) = self.table.find_allocated(block)?;
        Some(&mut self.vba.block_mut(slot)[linear])
    }

    pub fn block_of_entry(&self, entry: usize) -> Option<&[V]> {
        let e = self.table.entry(entry);
        e.is_allocated().then(|| self.vba.block(e.block_state))
    }

    pub fn block_of_entry_mut(&mut self, entry: usize) -> Option<&mut [V]> {
        let state = self.table.entry(entry).block_state;
        (state >= 0).then(|| self.vba.block_mut(state))
    }

    /// Block data by block position.
    pub fn block_at(&self, block: Vector3<i32>) -> Option<&[V]> {
        self.table.find_allocated(block).map(|(_, slot)| self.vba.block(slot))
    }
}

impl<V: Voxel> VolumeRead<V> for HashVolume<V> {
    fn voxel_size(&self) -> f32 {
        self.voxel_size
    }

    #[inline]
    fn read_voxel(&self, point: Vector3<i32>) -> Option<V> {
        let (block, linear) = voxel_to_block(point);
        let (_, slot) = self.table.find_allocated(block)?;
        Some(self.vba.block(slot)[linear])
    }

    #[inline]
    fn has_block(&self, block: Vector3<i32>) -> bool {
        self.table.find_allocated(block).is_some()
    }

    fn read_neighbourhood(&self, base: Vector3<i32>) -> Option<[V; 8]> {
        let local = base.map(|c| c.rem_euclid(BLOCK_SIDE));
        if local.x < BLOCK_SIDE - 1 && local.y < BLOCK_SIDE - 1 && local.z < BLOCK_SIDE - 1 {
            // all eight neighbours share one block
            let (block, linear) = voxel_to_block(base);
            let (_, slot) = self.table.find_allocated(block)?;
            let data = self.vba.block(slot);
            let mut out = [V::default(); 8];
            for (i, o) in out.iter_mut().enumerate() {
                let off = (i & 1) + ((i >> 1) & 1) * 8 + ((i >> 2) & 1) * 64;
                *o = data[linear + off];
            }
            return Some(out);
        }
        let mut out = [V::default(); 8];
        for (i, o) in out.iter_mut().enumerate() {
            let d = Vector3::new((i & 1) as i32, ((i >> 1) & 1) as i32, ((i >> 2) & 1) as i32);
            *o = self.read_voxel(base + d)?;
        }
        Some(out)
    }
}
