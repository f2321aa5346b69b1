use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;

use super::{spill, AttentionError};

/// Keys and values of one self-attention layer at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct KVPair {
    pub k: Array2<f32>,
    pub v: Array2<f32>,
    pub layer: usize,
    pub timestep: u32,
}

impl KVPair {
    pub fn new(k: Array2<f32>, v: Array2<f32>, layer: usize, timestep: u32) -> Result<Self, AttentionError> {
        if k.nrows() != v.nrows() {
            return Err(AttentionError::TokenMismatch {
                keys: k.nrows(),
                values: v.nrows(),
            });
        }
        Ok(Self { k, v, layer, timestep })
    }

    pub fn tokens(&self) -> usize {
        self.k.nrows()
    }

    pub fn bytes(&self) -> usize {
        (self.k.len() + self.v.len()) * std::mem::size_of::<f32>()
    }
}

type Key = (usize, u32);

fn expected_keys(layers: usize, timesteps: &[u32]) -> impl Iterator<Item = Key> + '_ {
    (0..layers).flat_map(move |l| timesteps.iter().map(move |&t| (l, t)))
}

/// Collects one frame's keys and values while it is being denoised.
#[derive(Debug, Clone)]
pub struct CacheBuilder {
    frame: usize,
    layers: usize,
    timesteps: Vec<u32>,
    entries: BTreeMap<Key, Arc<KVPair>>,
}

impl CacheBuilder {
    /// A builder expecting one entry for every `(layer, timestep)` pair.
    pub fn new(frame: usize, layers: usize, timesteps: Vec<u32>) -> Self {
        Self {
            frame,
            layers,
            timesteps,
            entries: BTreeMap::new(),
        }
    }

    pub fn frame(&self) -> usize {
        self.frame
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.entries.values().map(|kv| kv.bytes()).sum()
    }

    pub fn missing(&self) -> Vec<(usize, u32)> {
        expected_keys(self.layers, &self.timesteps)
            .filter(|k| !self.entries.contains_key(k))
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.entries.len() == self.layers * self.timesteps.len() && self.missing().is_empty()
    }

    pub fn store(&mut self, kv: KVPair) -> Result<(), AttentionError> {
        let key = (kv.layer, kv.timestep);
        if kv.layer >= self.layers || !self.timesteps.contains(&kv.timestep) {
            return Err(AttentionError::UnexpectedEntry {
                layer: kv.layer,
                timestep: kv.timestep,
            });
        }
        if self.entries.contains_key(&key) {
            return Err(AttentionError::DuplicateEntry {
                layer: kv.layer,
                timestep: kv.timestep,
            });
        }
        self.entries.insert(key, Arc::new(kv));
        Ok(())
    }

    /// Seals a complete builder into a read-only cache.
    pub fn finish(self) -> Result<AnchorCache, AttentionError> {
        if !self.is_complete() {
            return Err(AttentionError::Incomplete {
                frame: self.frame,
                missing: self.missing().len(),
            });
        }
        Ok(AnchorCache {
            frame: self.frame,
            layers: self.layers,
            timesteps: self.timesteps,
            store: Store::Memory(self.entries),
        })
    }
}

#[derive(Debug, Clone)]
enum Store {
    Memory(BTreeMap<Key, Arc<KVPair>>),
    Disk(PathBuf),
}

/// The complete keys and values of exactly one (anchor) frame.
#[derive(Debug, Clone)]
pub struct AnchorCache {
    frame: usize,
    layers: usize,
    timesteps: Vec<u32>,
    store: Store,
}

impl AnchorCache {
    pub fn anchor_frame(&self) -> usize {
        self.frame
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn timesteps(&self) -> &[u32] {
        &self.timesteps
    }

    pub fn keys(&self) -> Vec<(usize, u32)> {
        expected_keys(self.layers, &self.timesteps).collect()
    }

    pub fn len(&self) -> usize {
        self.layers * self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_spilled(&self) -> bool {
        matches!(self.store, Store::Disk(_))
    }

    /// Bytes held in memory; zero once spilled.
    pub fn resident_bytes(&self) -> usize {
        match &self.store {
            Store::Memory(m) => m.values().map(|kv| kv.bytes()).sum(),
            Store::Disk(_) => 0,
        }
    }

    pub fn load(&self, layer: usize, timestep: u32) -> Result<Arc<KVPair>, AttentionError> {
        let missing = AttentionError::MissingEntry { layer, timestep };
        if layer >= self.layers || !self.timesteps.contains(&timestep) {
            return Err(missing);
        }
        match &self.store {
            Store::Memory(m) => m.get(&(layer, timestep)).cloned().ok_or(missing),
            Store::Disk(dir) => {
                let path = dir.join(spill::record_file_name(layer, timestep));
                if !path.exists() {
                    return Err(missing);
                }
                let record = spill::read_record_file(&path)?;
                if record.frame != self.frame {
                    return Err(AttentionError::Spill(format!(
                        "{} belongs to frame {}, expected {}",
                        path.display(),
                        record.frame,
                        self.frame
                    )));
                }
                Ok(Arc::new(record.kv))
            }
        }
    }

    /// Writes every entry to `dir` and returns a disk-backed cache.
    pub fn spill_to(self, dir: &Path) -> Result<AnchorCache, AttentionError> {
        std::fs::create_dir_all(dir)?;
        for (layer, timestep) in self.keys() {
            let kv = self.load(layer, timestep)?;
            spill::write_record_file(&dir.join(spill::record_file_name(layer, timestep)), self.frame, &kv)?;
        }
        Ok(AnchorCache {
            frame: self.frame,
            layers: self.layers,
            timesteps: self.timesteps,
            store: Store::Disk(dir.to_path_buf()),
        })
    }

    /// Reads every spilled entry back into memory.
    pub fn into_memory(self) -> Result<AnchorCache, AttentionError> {
        if let Store::Memory(_) = self.store {
            return Ok(self);
        }
        let mut entries = BTreeMap::new();
        for key in self.keys() {
            entries.insert(key, self.load(key.0, key.1)?);
        }
        Ok(AnchorCache {
            store: Store::Memory(entries),
            ..self
        })
    }
}

pub fn cache_store(builder: &mut CacheBuilder, kv: KVPair) -> Result<(), AttentionError> {
    builder.store(kv)
}

pub fn cache_load(cache: &AnchorCache, layer: usize, timestep: u32) -> Result<Arc<KVPair>, AttentionError> {
    cache.load(layer, timestep)
}

/// Replaces the anchor with the next frame's freshly recorded features.
pub fn cache_promote(old: AnchorCache, fresh: CacheBuilder) -> Result<AnchorCache, AttentionError> {
    if fresh.frame() != old.anchor_frame() + 1 {
        return Err(AttentionError::NotConsecutive {
            anchor: old.anchor_frame(),
            fresh: fresh.frame(),
        });
    }
    let promoted = fresh.finish()?;
    drop(old);
    Ok(promoted)
}
