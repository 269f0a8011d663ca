//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `SDIFCKPT`, `u32` version, `u64` length +
//! JSON metadata, 32-byte RNG seed, `u64` RNG stream, `u128` RNG word
//! position, then the parameter and buffer tables. A table is a `u32` count
//! of entries `u32 name length, name, u32 rank, u64 dims…, f64 values…`.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SDIFCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub variant: String,
    pub seed: u64,
    pub epoch: usize,
    /// NaN when the validation split has a single class; stored as `null`.
    #[serde(deserialize_with = "nan_from_null")]
    pub val_auc: f64,
}

fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub rng: Rng,
    pub store: ParamStore,
}

fn write_table<'a>(w: &mut impl Write, entries: impl Iterator<Item = (&'a String, &'a Tensor)>) -> Result<()> {
    let entries: Vec<_> = entries.collect();
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_table(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let count = read_u32(r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| read_array(r).map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(out)
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&self.rng.get_seed())?;
        w.write_all(&self.rng.get_stream().to_le_bytes())?;
        w.write_all(&self.rng.get_word_pos().to_le_bytes())?;
        write_table(w, self.store.params())?;
        write_table(w, self.store.buffers())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let magic: [u8; 8] = read_array(r)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u64(r)? as usize;
        let mut meta = vec![0u8; len];
        r.read_exact(&mut meta)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut rng = Rng::from_seed(read_array(r)?);
        rng.set_stream(read_u64(r)?);
        rng.set_word_pos(u128::from_le_bytes(read_array(r)?));
        let mut store = ParamStore::new();
        for (name, t) in read_table(r)? {
            store.set(&name, t);
        }
        for (name, t) in read_table(r)? {
            store.set_buffer(&name, t);
        }
        Ok(Checkpoint { meta, rng, store })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}
