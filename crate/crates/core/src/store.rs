//! Register-array object storage.
//!
//! Every key owns a block of `versions_per_key` consecutive cells. Offset 0
//! holds the last acknowledged (clean) value; offsets `1..V` hold pending
//! versions in arrival order. Two per-key index registers make the object
//! state implicit:
//!
//! * `read_index`: offset of the newest local version, 0 when clean.
//! * `write_index`: offset of the next free pending slot, 0 when clean.
//!
//! While dirty, `write_index == read_index + 1` always holds.

use serde::{Deserialize, Serialize};

/// Value returned for keys that were never written.
pub const EMPTY_VALUE: u128 = 0;

const SNAPSHOT_MAGIC: &[u8; 4] = b"OBJS";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("invalid store configuration: {0}")]
    Config(String),

    #[error("key {key} out of range (store holds {num_keys} keys)")]
    KeyOutOfRange { key: u32, num_keys: u32 },

    #[error("corrupt snapshot: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub num_keys: u32,
    pub versions_per_key: u32,
}

impl StoreConfig {
    pub fn new(num_keys: u32, versions_per_key: u32) -> Result<Self, StoreError> {
        let cfg = Self {
            num_keys,
            versions_per_key,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.num_keys < 1 {
            return Err(StoreError::Config("num_keys must be at least 1".into()));
        }
        if self.versions_per_key < 2 {
            return Err(StoreError::Config(
                "versions_per_key must be at least 2".into(),
            ));
        }
        let cells = u64::from(self.num_keys) * u64::from(self.versions_per_key);
        if cells > u64::from(u32::MAX) {
            return Err(StoreError::Config(format!("{cells} cells exceed u32 range")));
        }
        Ok(())
    }
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            num_keys: 1024,
            versions_per_key: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectState {
    Clean,
    Dirty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendOutcome {
    /// Stored at this cell offset within the key's block.
    Committed { offset: u32 },
    /// No free pending slot; the store is unchanged.
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectStore {
    config: StoreConfig,
    cells: Vec<Option<u128>>,
    read_index: Vec<u32>,
    write_index: Vec<u32>,
}

impl ObjectStore {
    pub fn new(config: StoreConfig) -> Result<Self, StoreError> {
        config.validate()?;
        let k = config.num_keys as usize;
        let cells = k * config.versions_per_key as usize;
        Ok(Self {
            config,
            cells: vec![None; cells],
            read_index: vec![0; k],
            write_index: vec![0; k],
        })
    }

    pub fn config(&self) -> StoreConfig {
        self.config
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn read_index(&self, key: u32) -> Result<u32, StoreError> {
        Ok(self.read_index[self.slot(key)?])
    }

    pub fn write_index(&self, key: u32) -> Result<u32, StoreError> {
        Ok(self.write_index[self.slot(key)?])
    }

    /// Cells of one key's block, offset 0 first.
    pub fn block(&self, key: u32) -> Result<&[Option<u128>], StoreError> {
        let k = self.slot(key)?;
        let v = self.config.versions_per_key as usize;
        Ok(&self.cells[k * v..(k + 1) * v])
    }

    pub fn state_of(&self, key: u32) -> Result<ObjectState, StoreError> {
        let k = self.slot(key)?;
        Ok(if self.read_index[k] == 0 {
            ObjectState::Clean
        } else {
            ObjectState::Dirty
        })
    }

    pub fn read_latest_clean(&self, key: u32) -> Result<u128, StoreError> {
        let k = self.slot(key)?;
        Ok(self.cells[self.cell(k, 0)].unwrap_or(EMPTY_VALUE))
    }

    pub fn read_latest_any(&self, key: u32) -> Result<u128, StoreError> {
        let k = self.slot(key)?;
        let offset = self.read_index[k];
        Ok(self.cells[self.cell(k, offset)].unwrap_or(EMPTY_VALUE))
    }

    /// Appends a pending version behind the clean value.
    pub fn append_pending(&mut self, key: u32, value: u128) -> Result<AppendOutcome, StoreError> {
        let k = self.slot(key)?;
        let offset = if self.read_index[k] == 0 {
            1
        } else {
            self.write_index[k]
        };
        if offset >= self.config.versions_per_key {
            return Ok(AppendOutcome::Dropped);
        }
        let cell = self.cell(k, offset);
        self.cells[cell] = Some(value);
        self.read_index[k] = offset;
        self.write_index[k] = offset + 1;
        Ok(AppendOutcome::Committed { offset })
    }

    /// Installs `value` as the clean version and discards every pending one.
    pub fn commit_clean(&mut self, key: u32, value: u128) -> Result<(), StoreError> {
        let k = self.slot(key)?;
        let base = self.cell(k, 0);
        let v = self.config.versions_per_key as usize;
        self.cells[base] = Some(value);
        self.cells[base + 1..base + v].fill(None);
        self.read_index[k] = 0;
        self.write_index[k] = 0;
        Ok(())
    }

    /// Keys currently holding at least one pending version.
    pub fn dirty_keys(&self) -> impl Iterator<Item = u32> + '_ {
        self.read_index
            .iter()
            .enumerate()
            .filter(|(_, r)| **r != 0)
            .map(|(k, _)| k as u32)
    }

    /// Flat binary export of every cell and index register.
    ///
    /// Layout: magic `OBJS`, K (u32 BE), V (u32 BE), K·V cells of one
    /// presence byte plus 16 value bytes, then K read indices and K write
    /// indices as u32 BE.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.cells.len() * 17 + self.read_index.len() * 8);
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&self.config.num_keys.to_be_bytes());
        out.extend_from_slice(&self.config.versions_per_key.to_be_bytes());
        for cell in &self.cells {
            match cell {
                Some(v) => {
                    out.push(1);
                    out.extend_from_slice(&v.to_be_bytes());
                }
                None => {
                    out.push(0);
                    out.extend_from_slice(&[0u8; 16]);
                }
            }
        }
        for r in &self.read_index {
            out.extend_from_slice(&r.to_be_bytes());
        }
        for w in &self.write_index {
            out.extend_from_slice(&w.to_be_bytes());
        }
        out
    }

    pub fn from_snapshot(bytes: &[u8]) -> Result<Self, StoreError> {
        let bad = |msg: &str| StoreError::Snapshot(msg.to_string());
        if bytes.len() < 12 || &bytes[..4] != SNAPSHOT_MAGIC {
            return Err(bad("missing header"));
        }
        let num_keys = u32::from_be_bytes(bytes[4..8].try_into().expect("4 bytes"));
        let versions_per_key = u32::from_be_bytes(bytes[8..12].try_into().expect("4 bytes"));
        let config = StoreConfig::new(num_keys, versions_per_key)
            .map_err(|e| StoreError::Snapshot(e.to_string()))?;
        let k = num_keys as usize;
        let n_cells = k * versions_per_key as usize;
        let expected = 12 + n_cells * 17 + k * 8;
        if bytes.len() != expected {
            return Err(bad("length does not match header"));
        }
        let mut pos = 12;
        let mut cells = Vec::with_capacity(n_cells);
        for _ in 0..n_cells {
            let present = bytes[pos];
            let value = u128::from_be_bytes(bytes[pos + 1..pos + 17].try_into().expect("16 bytes"));
            cells.push(match present {
                0 => None,
                1 => Some(value),
                _ => return Err(bad("bad presence byte")),
            });
            pos += 17;
        }
        let mut read_u32s = |count: usize| {
            let v: Vec<u32> = bytes[pos..pos + 4 * count]
                .chunks_exact(4)
                .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")))
                .collect();
            pos += 4 * count;
            v
        };
        let read_index = read_u32s(k);
        let write_index = read_u32s(k);
        let store = Self {
            config,
            cells,
            read_index,
            write_index,
        };
        store.check_invariants().map_err(StoreError::Snapshot)?;
        Ok(store)
    }

    /// Verifies the index invariants for every key.
    pub fn check_invariants(&self) -> Result<(), String> {
        let v = self.config.versions_per_key;
        for k in 0..self.config.num_keys as usize {
            let (r, w) = (self.read_index[k], self.write_index[k]);
            if r >= v || w > v {
                return Err(format!("key {k}: indices r={r} w={w} out of range"));
            }
            if r == 0 && w != 0 {
                return Err(format!("key {k}: clean but write_index={w}"));
            }
            if r != 0 && w != r + 1 {
                return Err(format!("key {k}: dirty with r={r} w={w}"));
            }
            let block = &self.cells[k * v as usize..(k + 1) * v as usize];
            if let Some(off) = block[(w.max(1) as usize)..].iter().position(Option::is_some) {
                return Err(format!(
                    "key {k}: stale cell at offset {} beyond write_index",
                    off + w.max(1) as usize
                ));
            }
        }
        Ok(())
    }

    fn slot(&self, key: u32) -> Result<usize, StoreError> {
        if key >= self.config.num_keys {
            return Err(StoreError::KeyOutOfRange {
                key,
                num_keys: self.config.num_keys,
            });
        }
        Ok(key as usize)
    }

    fn cell(&self, slot: usize, offset: u32) -> usize {
        slot * self.config.versions_per_key as usize + offset as usize
    }
}
