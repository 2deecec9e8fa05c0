//! Coordinated checkpointing with a versioned binary format.
//!
//! On-disk layout (little-endian, bit-exact):
//!
//! ```text
//! magic "MLCK" | u16 version=1 | u32 rank | u64 iter | u64 body_len | body | u32 crc32
//! ```
//!
//! The crc32 (IEEE) covers everything from the magic through the body. The
//! body starts with one kernel-id byte followed by the kernel's serialized
//! state.
//!
//! Checkpoints are written per rank but promoted per generation: a rank
//! stages its file when it commits the checkpoint iteration, and the
//! generation becomes the restart target only once every rank has staged
//! it. A failure before that leaves the previous complete generation in
//! place and the incomplete staged one is discarded during recovery.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::CheckpointError;

pub const MAGIC: &[u8; 4] = b"MLCK";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 8 + 8;

/// Decoded checkpoint record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub rank: u32,
    pub iter: u64,
    pub kernel_id: u8,
    pub state_bytes: Vec<u8>,
}

pub fn encode(rank: u32, iter: u64, kernel_id: u8, state_bytes: &[u8]) -> Vec<u8> {
    let body_len = (state_bytes.len() + 1) as u64;
    let mut buf = Vec::with_capacity(HEADER_LEN + body_len as usize + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&rank.to_le_bytes());
    buf.extend_from_slice(&iter.to_le_bytes());
    buf.extend_from_slice(&body_len.to_le_bytes());
    buf.push(kernel_id);
    buf.extend_from_slice(state_bytes);
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn decode(bytes: &[u8], rank: usize) -> Result<Checkpoint, CheckpointError> {
    let corrupt = |reason: &str| CheckpointError::Corrupt {
        rank,
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN + 1 + 4 {
        return Err(corrupt("truncated"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt("unsupported version"));
    }
    let file_rank = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    let iter = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
    let body_len = u64::from_le_bytes(bytes[18..26].try_into().unwrap()) as usize;
    if body_len == 0 || bytes.len() != HEADER_LEN + body_len + 4 {
        return Err(corrupt("length mismatch"));
    }
    let crc_stored = u32::from_le_bytes(bytes[HEADER_LEN + body_len..].try_into().unwrap());
    let crc_actual = crc32(&bytes[..HEADER_LEN + body_len]);
    if crc_stored != crc_actual {
        return Err(corrupt("crc mismatch"));
    }
    Ok(Checkpoint {
        rank: file_rank,
        iter,
        kernel_id: bytes[HEADER_LEN],
        state_bytes: bytes[HEADER_LEN + 1..HEADER_LEN + body_len].to_vec(),
    })
}

/// CRC-32 (IEEE 802.3), table-driven.
pub fn crc32(data: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, entry) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB88320 ^ (c >> 1) } else { c >> 1 };
            }
            *entry = c;
        }
        t
    });
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = table[((crc ^ u32::from(b)) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

/// Storage backend for checkpoints. One writer per (run, rank); the
/// simulator serializes all access.
pub trait CheckpointStore: Send {
    /// Stages rank's checkpoint for generation `iter`.
    fn stage(&mut self, rank: usize, iter: u64, encoded: &[u8]) -> Result<(), CheckpointError>;
    /// Promotes the staged generation to the restart target and drops the
    /// previous one. Called once every rank has staged `iter`.
    fn complete_generation(&mut self, iter: u64) -> Result<(), CheckpointError>;
    /// Drops a half-written generation. Called during recovery.
    fn discard_staged(&mut self) -> Result<(), CheckpointError>;
    /// Most recent complete checkpoint for `rank`.
    fn read(&self, rank: usize) -> Result<Checkpoint, CheckpointError>;
    /// Iteration of the last complete generation, 0 if none.
    fn complete_iter(&self) -> u64;
}

/// In-memory store for tests and sweeps.
#[derive(Debug, Default)]
pub struct MemoryStore {
    current: BTreeMap<usize, Vec<u8>>,
    staged: BTreeMap<usize, Vec<u8>>,
    current_iter: u64,
}

impl CheckpointStore for MemoryStore {
    fn stage(&mut self, rank: usize, _iter: u64, encoded: &[u8]) -> Result<(), CheckpointError> {
        self.staged.insert(rank, encoded.to_vec());
        Ok(())
    }

    fn complete_generation(&mut self, iter: u64) -> Result<(), CheckpointError> {
        self.current = std::mem::take(&mut self.staged);
        self.current_iter = iter;
        Ok(())
    }

    fn discard_staged(&mut self) -> Result<(), CheckpointError> {
        self.staged.clear();
        Ok(())
    }

    fn read(&self, rank: usize) -> Result<Checkpoint, CheckpointError> {
        let bytes = self
            .current
            .get(&rank)
            .ok_or(CheckpointError::Missing { rank })?;
        decode(bytes, rank)
    }

    fn complete_iter(&self) -> u64 {
        self.current_iter
    }
}

/// File-backed store: `ckpt_<kernel>_<rank>.bin` per rank in a run-scoped
/// directory, exactly one complete generation retained. Writes go through
/// a temp file and rename.
#[derive(Debug)]
pub struct FileStore {
    dir: PathBuf,
    kernel: String,
    staged: Vec<(usize, PathBuf)>,
    current_iter: u64,
}

impl FileStore {
    pub fn new(dir: &Path, kernel: &str) -> Result<Self, CheckpointError> {
        fs::create_dir_all(dir)?;
        Ok(FileStore {
            dir: dir.to_path_buf(),
            kernel: kernel.to_string(),
            staged: Vec::new(),
            current_iter: 0,
        })
    }

    fn main_path(&self, rank: usize) -> PathBuf {
        self.dir.join(format!("ckpt_{}_{}.bin", self.kernel, rank))
    }

    fn staged_path(&self, rank: usize) -> PathBuf {
        self.dir
            .join(format!("ckpt_{}_{}.bin.staged", self.kernel, rank))
    }
}

impl CheckpointStore for FileStore {
    fn stage(&mut self, rank: usize, _iter: u64, encoded: &[u8]) -> Result<(), CheckpointError> {
        let tmp = self.dir.join(format!(".ckpt_{}_{}.tmp", self.kernel, rank));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(encoded)?;
            f.sync_all()?;
        }
        let staged = self.staged_path(rank);
        fs::rename(&tmp, &staged)?;
        self.staged.push((rank, staged));
        Ok(())
    }

    fn complete_generation(&mut self, iter: u64) -> Result<(), CheckpointError> {
        // The previous generation is only removed by these renames, after
        // every rank's new file validated its write.
        for (rank, staged) in std::mem::take(&mut self.staged) {
            fs::rename(&staged, self.main_path(rank))?;
        }
        self.current_iter = iter;
        Ok(())
    }

    fn discard_staged(&mut self) -> Result<(), CheckpointError> {
        for (_, staged) in std::mem::take(&mut self.staged) {
            if staged.exists() {
                fs::remove_file(&staged)?;
            }
        }
        Ok(())
    }

    fn read(&self, rank: usize) -> Result<Checkpoint, CheckpointError> {
        let path = self.main_path(rank);
        if !path.exists() {
            return Err(CheckpointError::Missing { rank });
        }
        let bytes = fs::read(path)?;
        decode(&bytes, rank)
    }

    fn complete_iter(&self) -> u64 {
        self.current_iter
    }
}

/// True iff the end of iteration `iter` is a checkpoint boundary.
pub fn should_checkpoint(iter: u64, cp_int: u64) -> bool {
    debug_assert!(iter >= 1);
    iter.is_multiple_of(cp_int)
}
