//! Checkpoint container format shared by model, adapter, and trainer state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"CARL"            4 bytes
//! version u32                currently 1
//! hlen    u64                header byte length
//! header  UTF-8 JSON         {kind, config, extras, tensors: name -> {offset, shape}}
//! blobs   f64 LE             contiguous; offsets are byte offsets into this section
//! ```
//!
//! Tensors are written in name order (`BTreeMap`), so identical contents
//! produce identical bytes. Round-trips are bit-exact: floats are moved via
//! `to_bits`/`from_bits`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CARL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported format version {found} (expected {expected})")]
    VersionMismatch {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: corrupt checkpoint: {detail}")]
    Corrupt { path: String, detail: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    #[serde(default)]
    extras: BTreeMap<String, serde_json::Value>,
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    offset: u64,
    shape: Vec<usize>,
}

/// A loaded checkpoint: kind tag, config echo, free-form extras, and the
/// named tensor map.
#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub extras: BTreeMap<String, serde_json::Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn corrupt(path: &Path, detail: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Write a checkpoint. `config` is any serializable config echo; `extras`
/// carries small scalar state (epoch counters, optimizer step, ...).
pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    extras: BTreeMap<String, serde_json::Value>,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
        }
    }
    let mut entries = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.insert(
            name.clone(),
            TensorEntry {
                offset,
                shape: t.shape().to_vec(),
            },
        );
        offset += (t.numel() * 8) as u64;
    }
    let header = Header {
        kind: kind.to_string(),
        config,
        extras,
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| corrupt(path, format!("header serialization: {e}")))?;

    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    w.write_all(&header_json).map_err(|e| io_err(path, e))?;
    for t in tensors.values() {
        for &v in t.data() {
            w.write_all(&v.to_bits().to_le_bytes())
                .map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| corrupt(path, "truncated before magic"))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            path: path.display().to_string(),
        });
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)
        .map_err(|_| corrupt(path, "truncated before version"))?;
    let version = u32::from_le_bytes(v4);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            path: path.display().to_string(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8)
        .map_err(|_| corrupt(path, "truncated before header length"))?;
    let hlen = u64::from_le_bytes(l8) as usize;
    let mut header_bytes = vec![0u8; hlen];
    r.read_exact(&mut header_bytes)
        .map_err(|_| corrupt(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| corrupt(path, format!("header JSON: {e}")))?;

    let mut blob = Vec::new();
    r.read_to_end(&mut blob).map_err(|e| io_err(path, e))?;

    let mut tensors = BTreeMap::new();
    for (name, entry) in header.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 8;
        if end > blob.len() {
            return Err(corrupt(
                path,
                format!("tensor {name} spans {start}..{end}, blob has {}", blob.len()),
            ));
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in blob[start..end].chunks_exact(8) {
            data.push(f64::from_bits(u64::from_le_bytes(chunk.try_into().unwrap())));
        }
        let t = Tensor::new(entry.shape, data)
            .map_err(|e| corrupt(path, format!("tensor {name}: {e}")))?;
        tensors.insert(name, t);
    }

    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        extras: header.extras,
        tensors,
    })
}
