//! Portable binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CORESCKPT"                      magic, 9 bytes
//! u32 version                       currently 1
//! u32 header_len, header bytes      UTF-8 key=value lines
//! u32 record_count
//! per record:
//!   u32 name_len, name bytes        UTF-8
//!   u32 rank, u64 dims[rank]
//!   f64 payload[product(dims)]
//! ```

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 9] = b"CORESCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(header: impl Into<String>, store: &ParamStore) -> Self {
        Self {
            header: header.into(),
            tensors: store
                .iter()
                .map(|(_, n, t)| {
                    let mut t = t.clone();
                    t.zero_grad();
                    t.set_requires_grad(false);
                    (n.to_string(), t)
                })
                .collect(),
        }
    }

    /// Header parsed as `key=value` lines. Blank lines and `#` comments are skipped.
    pub fn header_map(&self) -> BTreeMap<String, String> {
        parse_header(&self.header)
    }

    /// Copies tensor values into `store`, requiring identical names and shapes.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        if self.tensors.len() != store.len() {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = store
                .id_of(name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("unknown tensor {name}")))?;
            let dst = store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "{name}: shape {:?} vs model {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_bytes(&mut w, self.header.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_bytes(&mut w, name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 9];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let header = read_string(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = read_string(&mut r)?;
            let rank = read_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(CheckpointError::Malformed(format!("{name}: rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                dims.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = dims.iter().product();
            let mut data = Vec::with_capacity(numel.min(1 << 24));
            for _ in 0..numel {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            let t = Tensor::new(dims, data)
                .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let f = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(io::BufReader::new(f))
    }
}

pub fn parse_header(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// Renders `key=value` lines in sorted key order.
pub fn render_header(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> io::Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R) -> Result<String, CheckpointError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    String::from_utf8(buf).map_err(|e| CheckpointError::Malformed(e.to_string()))
}
