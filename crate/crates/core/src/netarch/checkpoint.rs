//! Binary tensor container used for checkpoints.
//!
//! Layout: the 8-byte magic `U2CKPT1\n`, a little-endian `u64` byte length,
//! that many bytes of UTF-8 JSON index, then the raw little-endian payload.
//! The index has a free-form `meta` object and a `tensors` map from name to
//! `{offset, shape, dtype}`, offsets counted from the start of the payload.
//! Tensors are stored in name order, so equal contents give equal bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::ModelState;
use super::{DomainSpec, NetworkConfig};
use crate::error::{Error, Result};
use crate::real::{Precision, Real};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"U2CKPT1\n";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub offset: u64,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Index {
    meta: serde_json::Value,
    tensors: BTreeMap<String, TensorEntry>,
}

/// Decoded container contents.
#[derive(Clone, Debug)]
pub struct Container<T> {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn write_container<T: Real>(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &BTreeMap<String, &Tensor<T>>,
) -> Result<()> {
    let mut index = Index {
        meta: meta.clone(),
        tensors: BTreeMap::new(),
    };
    let mut payload = Vec::new();
    for (name, t) in tensors {
        index.tensors.insert(
            name.clone(),
            TensorEntry {
                offset: payload.len() as u64,
                shape: t.shape().to_vec(),
                dtype: T::DTYPE.to_string(),
            },
        );
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let json = serde_json::to_vec(&index)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    write_atomic(path, &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn decode<T: Real, U: Real>(bytes: &[u8], n: usize) -> Vec<T> {
    (0..n)
        .map(|i| {
            let v = U::read_le(&bytes[i * U::BYTES..]);
            T::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN))
        })
        .collect()
}

/// Reads a container, converting stored elements to `T`.
pub fn read_container<T: Real>(path: &Path) -> Result<Container<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a U2CKPT1 checkpoint"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json_end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(path, "truncated index"))?;
    let index: Index = serde_json::from_slice(&bytes[16..json_end])?;
    let payload = &bytes[json_end..];
    let mut tensors = BTreeMap::new();
    for (name, e) in index.tensors {
        let n: usize = e.shape.iter().product();
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::format(path, format!("`{name}`: unsupported dtype {other}"))),
        };
        let start = e.offset as usize;
        let end = start + n * width;
        if end > payload.len() {
            return Err(Error::format(path, format!("`{name}`: payload out of bounds")));
        }
        let raw = &payload[start..end];
        let data = if width == 4 {
            decode::<T, f32>(raw, n)
        } else {
            decode::<T, f64>(raw, n)
        };
        tensors.insert(name, Tensor::new(&e.shape, data)?);
    }
    Ok(Container {
        meta: index.meta,
        tensors,
    })
}

/// Element type of the tensors stored in a container (that of the first
/// tensor; `f32` for an empty container).
pub fn container_precision(path: &Path) -> Result<Precision> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a U2CKPT1 checkpoint"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(path, "truncated index"))?;
    let index: Index = serde_json::from_slice(&bytes[16..end])?;
    match index.tensors.values().next().map(|e| e.dtype.as_str()) {
        None | Some("f32") => Ok(Precision::F32),
        Some("f64") => Ok(Precision::F64),
        Some(other) => Err(Error::format(path, format!("unsupported dtype {other}"))),
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: NetworkConfig,
    domains: Vec<DomainSpec>,
    frozen: BTreeSet<String>,
}

impl<T: Real> ModelState<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(ModelMeta {
            config: self.config().clone(),
            domains: self.domains().to_vec(),
            frozen: self.frozen().clone(),
        })?;
        let tensors: BTreeMap<String, &Tensor<T>> = self.named_params().collect();
        write_container(path, &meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = read_container::<T>(path)?;
        let meta: ModelMeta =
            serde_json::from_value(c.meta).map_err(|e| Error::format(path, format!("checkpoint metadata: {e}")))?;
        ModelState::from_parts(meta.config, meta.domains, c.tensors, meta.frozen)
    }
}
