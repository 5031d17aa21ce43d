//! Versioned binary checkpoint encoding.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"SIMICKPT"
//! version  u32
//! dtype    u8            1 = f32, 2 = f64
//! digest   [u8; 32]      configuration digest
//! meta     u32 len + UTF-8 JSON
//! count    u32
//! count × { u32 name len, UTF-8 name, u32 rank, u64 dims…, raw values }
//! step     u64           optimizer step
//! count × { first moment values, second moment values }
//! ```

use super::params::{Param, ParamStore};
use super::tensor::{Real, Tensor, MAX_RANK};
use crate::error::{Result, SimiError};

pub const MAGIC: &[u8; 8] = b"SIMICKPT";
pub const VERSION: u32 = 1;

pub type Digest = [u8; 32];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointData<T> {
    pub digest: Digest,
    pub meta: String,
    pub store: ParamStore<T>,
}

pub fn encode<T: Real>(store: &ParamStore<T>, digest: &Digest, meta: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE);
    out.extend_from_slice(digest);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        write_values(&mut out, p.value.data());
    }
    out.extend_from_slice(&store.step().to_le_bytes());
    for (_, p) in store.iter() {
        write_values(&mut out, p.first_moment.data());
        write_values(&mut out, p.second_moment.data());
    }
    out
}

fn write_values<T: Real>(out: &mut Vec<u8>, values: &[T]) {
    for &v in values {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            SimiError::CorruptCheckpoint(format!("truncated at byte {} (wanted {n} more)", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| SimiError::CorruptCheckpoint("invalid UTF-8".into()))
    }

    fn values<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let len = n
            .checked_mul(T::BYTES)
            .ok_or_else(|| SimiError::CorruptCheckpoint("tensor size overflow".into()))?;
        Ok(self.take(len)?.chunks_exact(T::BYTES).map(T::read_le).collect())
    }
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<CheckpointData<T>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(SimiError::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(SimiError::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let dtype = r.take(1)?[0];
    if dtype != T::DTYPE {
        return Err(SimiError::CorruptCheckpoint(format!(
            "stored dtype tag {dtype}, expected {}",
            T::DTYPE
        )));
    }
    let digest: Digest = r.take(32)?.try_into().expect("32 bytes");
    let meta = r.string()?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank > MAX_RANK {
            return Err(SimiError::CorruptCheckpoint(format!("rank {rank} for `{name}`")));
        }
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| {
            SimiError::CorruptCheckpoint(format!("shape overflow for `{name}`"))
        })?;
        let value = Tensor::new(&shape, r.values(numel)?)?;
        entries.push((name, value));
    }
    let step = r.u64()?;
    let mut store = ParamStore::new();
    for (name, value) in entries {
        let shape = value.shape().to_vec();
        let first_moment = Tensor::new(&shape, r.values(value.numel())?)?;
        let second_moment = Tensor::new(&shape, r.values(value.numel())?)?;
        store
            .insert_param(name, Param { value, grad: None, first_moment, second_moment })
            .map_err(|e| SimiError::CorruptCheckpoint(e.to_string()))?;
    }
    store.set_step(step);
    if r.at != bytes.len() {
        return Err(SimiError::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(CheckpointData { digest, meta, store })
}
