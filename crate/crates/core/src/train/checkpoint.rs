//! Binary checkpoints of named tensors.
//!
//! Layout: magic `EPALM\x01`, u32 tensor count, then per tensor a u16 name
//! length, the UTF-8 name, a u8 dtype code, a u8 rank, u32 dims and raw
//! little-endian values. A CRC32 of everything after the magic closes the file.
//! Integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{DType, Float};

pub const MAGIC: &[u8; 6] = b"EPALM\x01";

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Raw little-endian bytes.
    pub bytes: Vec<u8>,
}

impl StoredTensor {
    pub fn values<T: Float>(&self) -> Vec<T> {
        match self.dtype {
            d if d == T::DTYPE => self.bytes.chunks(d.size_of()).map(T::from_le_chunk).collect(),
            DType::F32 => self
                .bytes
                .chunks(4)
                .map(|c| T::from_f64_lossy(f32::from_le_chunk(c) as f64))
                .collect(),
            DType::F64 => self.bytes.chunks(8).map(|c| T::from_f64_lossy(f64::from_le_chunk(c))).collect(),
        }
    }
}

/// Sidecar metadata, written next to the checkpoint as `<file>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u8,
    pub variant: serde_json::Value,
    pub step: u64,
    pub epoch: usize,
    pub trainable_only: bool,
}

pub fn encode<T: Float>(store: &ParamStore<T>, trainable_only: bool) -> Result<Vec<u8>> {
    let chosen: Vec<_> = store.iter().filter(|(_, p)| !trainable_only || p.trainable()).collect();
    let mut body = Vec::new();
    body.extend_from_slice(&(chosen.len() as u32).to_le_bytes());
    for (_, p) in chosen {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {}", p.name)))?;
        body.extend_from_slice(&len.to_le_bytes());
        body.extend_from_slice(name);
        body.push(T::DTYPE.code());
        let shape = p.tensor.shape();
        body.push(u8::try_from(shape.len()).map_err(|_| Error::Checkpoint("rank above 255".into()))?);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint("dimension above u32".into()))?;
            body.extend_from_slice(&d.to_le_bytes());
        }
        body.extend_from_slice(&T::to_le_bytes_vec(p.tensor.data()));
    }
    let crc = crc32fast::hash(&body);
    let mut out = Vec::with_capacity(MAGIC.len() + body.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<StoredTensor>> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    if &bytes[..5] != b"EPALM" {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    if bytes[5] != MAGIC[5] {
        return Err(Error::Checkpoint(format!("unsupported format version {}", bytes[5])));
    }
    let body = &bytes[MAGIC.len()..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("four bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch (corrupt or truncated file)".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = DType::from_code(r.u8()?).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype")))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = r.take(n * dtype.size_of())?.to_vec();
        out.push(StoredTensor { name, dtype, shape, bytes });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Float>(store: &ParamStore<T>, path: &Path, trainable_only: bool) -> Result<()> {
    std::fs::write(path, encode(store, trainable_only)?)?;
    Ok(())
}

pub fn save_checkpoint_with_meta<T: Float>(store: &ParamStore<T>, path: &Path, meta: &CheckpointMeta) -> Result<()> {
    save_checkpoint(store, path, meta.trainable_only)?;
    std::fs::write(meta_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<StoredTensor>> {
    decode(&std::fs::read(path)?)
}

/// Writes every stored tensor into the parameter of the same name. Names
/// missing from the model, or shape mismatches, are errors. Returns the count loaded.
pub fn load_into<T: Float>(tensors: &[StoredTensor], store: &mut ParamStore<T>) -> Result<usize> {
    for t in tensors {
        let id = store
            .id(&t.name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint tensor {} has no counterpart in the model", t.name)))?;
        let want = store.tensor(id).shape();
        if want != t.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: checkpoint shape {:?} but model expects {:?}",
                t.name, t.shape, want
            )));
        }
    }
    for t in tensors {
        let id = store.id(&t.name).expect("checked above");
        store.set_data(id, &t.values::<T>())?;
    }
    Ok(tensors.len())
}

pub fn load_checkpoint<T: Float>(path: &Path, store: &mut ParamStore<T>) -> Result<usize> {
    load_into(&read_checkpoint(path)?, store)
}
