//! Host-side block storage addressed by hash entry index.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::SwapError;
use crate::index::BLOCK_VOXELS;
use crate::voxel::{Voxel, VoxelType};

pub const STORE_MAGIC: [u8; 8] = *b"VXFHOST\0";
pub const STORE_VERSION: u32 = 1;
/// magic, version, voxel type tag, entry count (u64), record length.
pub const HEADER_LEN: u64 = 8 + 4 + 4 + 8 + 4 + 4;

/// Backing store for swapped-out blocks: one slot per hash entry.
pub trait HostStore<V: Voxel>: Send {
    fn write_block(&mut self, entry: usize, voxels: &[V]) -> Result<(), SwapError>;
    /// Fills `out` with the block last written for `entry`.
    fn read_block(&mut self, entry: usize, out: &mut [V]) -> Result<(), SwapError>;
    fn flush(&mut self) -> Result<(), SwapError> {
        Ok(())
    }
}

/// Keeps blocks in memory, sparse over entries.
#[derive(Debug, Default)]
pub struct MemoryStore<V> {
    blocks: HashMap<usize, Box<[V]>>,
}

impl<V: Voxel> MemoryStore<V> {
    pub fn new() -> Self {
        Self { blocks: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

impl<V: Voxel> HostStore<V> for MemoryStore<V> {
    fn write_block(&mut self, entry: usize, voxels: &[V]) -> Result<(), SwapError> {
        self.blocks.insert(entry, voxels.into());
        Ok(())
    }

    fn read_block(&mut self, entry: usize, out: &mut [V]) -> Result<(), SwapError> {
        let block = self
            .blocks
            .get(&entry)
            .ok_or_else(|| SwapError::BadStore(format!("no block stored for entry {entry}")))?;
        out.copy_from_slice(block);
        Ok(())
    }
}

/// Fixed-layout file: a header, then one record per hash entry at
/// `HEADER_LEN + entry * record_len`. A record is the entry index (u32 LE)
/// followed by 512 encoded voxels. Unwritten records read back as zeros and
/// are rejected by the index check.
#[derive(Debug)]
pub struct FileStore<V> {
    file: File,
    entry_count: u64,
    buffer: Vec<u8>,
    _voxel: std::marker::PhantomData<V>,
}

impl<V: Voxel> FileStore<V> {
    pub fn record_len() -> usize {
        4 + BLOCK_VOXELS * V::ENCODED_LEN
    }

    /// Creates (or truncates) a store for `entry_count` entries.
    pub fn create(path: &Path, entry_count: usize) -> Result<Self, SwapError> {
        let mut file = OpenOptions::new().read(true).write(true).create(true).truncate(true).open(path)?;
        let mut header = Vec::with_capacity(HEADER_LEN as usize);
        header.extend_from_slice(&STORE_MAGIC);
        header.extend_from_slice(&STORE_VERSION.to_le_bytes());
        header.extend_from_slice(&(V::TYPE as u32).to_le_bytes());
        header.extend_from_slice(&(entry_count as u64).to_le_bytes());
        header.extend_from_slice(&(Self::record_len() as u32).to_le_bytes());
        header.extend_from_slice(&0u32.to_le_bytes());
        file.write_all(&header)?;
        file.set_len(HEADER_LEN + entry_count as u64 * Self::record_len() as u64)?;
        Ok(Self::with_file(file, entry_count as u64))
    }

    /// Opens an existing store, checking its header.
    pub fn open(path: &Path) -> Result<Self, SwapError> {
        let mut file = OpenOptions::new().read(true).write(true).open(path)?;
        let mut header = [0u8; HEADER_LEN as usize];
        file.read_exact(&mut header)
            .map_err(|_| SwapError::BadStore("truncated header".into()))?;
        if header[0..8] != STORE_MAGIC {
            return Err(SwapError::BadStore("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
        if word(8) != STORE_VERSION {
            return Err(SwapError::BadStore(format!("unsupported version {}", word(8))));
        }
        if VoxelType::from_tag(word(12)) != Some(V::TYPE) {
            return Err(SwapError::BadStore(format!("voxel type tag {} does not match {:?}", word(12), V::TYPE)));
        }
        let entry_count = u64::from_le_bytes(header[16..24].try_into().expect("8 bytes"));
        if word(24) as usize != Self::record_len() {
            return Err(SwapError::BadStore("record length mismatch".into()));
        }
        let expected = HEADER_LEN + entry_count * Self::record_len() as u64;
        if file.metadata()?.len() < expected {
            return Err(SwapError::BadStore("file shorter than its entry count".into()));
        }
        Ok(Self::with_file(file, entry_count))
    }

    fn with_file(file: File, entry_count: u64) -> Self {
        Self {
            file,
            entry_count,
            buffer: vec![0; Self::record_len()],
            _voxel: std::marker::PhantomData,
        }
    }

    pub fn entry_count(&self) -> usize {
        self.entry_count as usize
    }

    fn seek_record(&mut self, entry: usize) -> Result<(), SwapError> {
        if entry as u64 >= self.entry_count {
            return Err(SwapError::BadStore(format!("entry {entry} outside store of {}", self.entry_count)));
        }
        self.file
            .seek(SeekFrom::Start(HEADER_LEN + entry as u64 * Self::record_len() as u64))?;
        Ok(())
    }
}

impl<V: Voxel> HostStore<V> for FileStore<V> {
    fn write_block(&mut self, entry: usize, voxels: &[V]) -> Result<(), SwapError> {
        self.seek_record(entry)?;
        self.buffer[0..4].copy_from_slice(&(entry as u32).to_le_bytes());
        for (v, chunk) in voxels.iter().zip(self.buffer[4..].chunks_exact_mut(V::ENCODED_LEN)) {
            v.encode(chunk);
        }
        self.file.write_all(&self.buffer)?;
        Ok(())
    }

    fn read_block(&mut self, entry: usize, out: &mut [V]) -> Result<(), SwapError> {
        self.seek_record(entry)?;
        self.file.read_exact(&mut self.buffer)?;
        let stored = u32::from_le_bytes(self.buffer[0..4].try_into().expect("4 bytes"));
        // entry 0 is indistinguishable from an unwritten record; trust the caller there
        if stored as usize != entry {
            return Err(SwapError::BadStore(format!("record {entry} holds entry {stored}")));
        }
        for (v, chunk) in out.iter_mut().zip(self.buffer[4..].chunks_exact(V::ENCODED_LEN)) {
            *v = V::decode(chunk);
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<(), SwapError> {
        self.file.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{VoxelF, VoxelS, VoxelSRgb};

    fn block<V: Voxel>(seed: i32) -> Vec<V> {
        (0..BLOCK_VOXELS as i32)
            .map(|i| {
                let mut v = V::default();
                v.set_sdf(((i * 37 + seed) % 200 - 100) as f32 / 100.0);
                v.set_w_depth((i % 100) as u8);
                v.set_color([(i % 256) as u8, seed as u8, 7]);
                v.set_w_color(3);
                v
            })
            .collect()
    }

    #[test]
    fn file_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("host.bin");
        let mut store = FileStore::<VoxelSRgb>::create(&path, 100).unwrap();
        let (a, b) = (block::<VoxelSRgb>(3), block::<VoxelSRgb>(9));
        store.write_block(42, &a).unwrap();
        store.write_block(7, &b).unwrap();
        drop(store);
        let mut store = FileStore::<VoxelSRgb>::open(&path).unwrap();
        let mut out = vec![VoxelSRgb::default(); BLOCK_VOXELS];
        store.read_block(42, &mut out).unwrap();
        assert_eq!(out, a);
        store.read_block(7, &mut out).unwrap();
        assert_eq!(out, b);
        assert!(matches!(store.read_block(8, &mut out), Err(SwapError::BadStore(_))));
        assert!(store.read_block(100, &mut out).is_err());
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, HEADER_LEN + 100 * FileStore::<VoxelSRgb>::record_len() as u64);
    }

    #[test]
    fn header_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("host.bin");
        FileStore::<VoxelS>::create(&path, 4).unwrap();
        assert!(matches!(FileStore::<VoxelF>::open(&path), Err(SwapError::BadStore(_))));
        assert!(FileStore::<VoxelS>::open(&path).is_ok());
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(FileStore::<VoxelS>::open(&path), Err(SwapError::BadStore(_))));
        std::fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(FileStore::<VoxelS>::open(&path), Err(SwapError::BadStore(_))));
    }

    #[test]
    fn memory_roundtrip() {
        let mut store = MemoryStore::<VoxelF>::new();
        let a = block::<VoxelF>(1);
        store.write_block(5, &a).unwrap();
        let mut out = vec![VoxelF::default(); BLOCK_VOXELS];
        store.read_block(5, &mut out).unwrap();
        assert_eq!(out, a);
        assert!(store.read_block(6, &mut out).is_err());
    }
}
