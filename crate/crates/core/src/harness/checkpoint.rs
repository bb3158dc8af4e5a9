//! Versioned binary parameter container.
//!
//! Layout (little-endian): magic `HMCK`, `u32` version, then records up to
//! the end of the file, each: `u32` name length, UTF-8 name, `u8` group tag
//! (0 internal, 1 external), `u32` rank, `rank × u64` dims, `f64` payload.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::nn::{Group, ParamEntry, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

pub fn encode_checkpoint(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for e in params.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.group.tag());
        out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, params: &ParamSet) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&encode_checkpoint(params)).map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes).map_err(|reason| CheckpointError::Format {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamSet, String> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let mut entries = Vec::new();
    while !r.is_empty() {
        let k = entries.len();
        let name_len = read_u32(&mut r, "name length")? as usize;
        if name_len > r.len() {
            return Err(format!("record {k}: truncated name"));
        }
        let (name, rest) = r.split_at(name_len);
        let name = String::from_utf8(name.to_vec()).map_err(|_| format!("record {k}: name is not UTF-8"))?;
        r = rest;
        let mut tag = [0u8; 1];
        read_exact(&mut r, &mut tag, "group tag")?;
        let group = Group::from_tag(tag[0]).ok_or_else(|| format!("{name}: unknown group tag {}", tag[0]))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, "dimension")?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.len()))
            .ok_or_else(|| format!("{name}: payload truncated or shape {shape:?} too large"))?;
        let data = (0..numel)
            .map(|_| {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b, "payload").map(|_| f64::from_le_bytes(b))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let value = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?;
        entries.push(ParamEntry { name, group, value });
    }
    Ok(ParamSet::from_entries(entries))
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<(), String> {
    r.read_exact(buf).map_err(|_| format!("truncated while reading {what}"))
}

fn read_u32(r: &mut &[u8], what: &str) -> Result<u32, String> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
