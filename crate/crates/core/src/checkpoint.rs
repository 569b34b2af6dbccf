//! Binary parameter checkpoints.
//!
//! Layout: `b"RPCK"`, `u32` format version, `u64` header length, a JSON
//! header, then every parameter as little-endian `f64` in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub name: String,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    stores: Vec<StoreEntry>,
    meta: serde_json::Value,
}

/// A decoded checkpoint: free-form metadata plus named parameter stores.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub stores: Vec<(StoreEntry, Vec<Tensor>)>,
}

impl Checkpoint {
    pub fn store(&self, name: &str) -> Result<&(StoreEntry, Vec<Tensor>)> {
        self.stores
            .iter()
            .find(|(e, _)| e.name == name)
            .ok_or_else(|| Error::NotFound(format!("checkpoint store {name:?}")))
    }

    /// Copy the named store into `target`, checking names and shapes.
    pub fn restore(&self, name: &str, target: &mut ParamStore) -> Result<()> {
        let (entry, tensors) = self.store(name)?;
        let expected: Vec<(&str, &[usize])> = target.iter().map(|(n, t)| (n, t.shape())).collect();
        let found: Vec<(&str, &[usize])> = entry.params.iter().map(|p| (p.name.as_str(), p.shape.as_slice())).collect();
        if expected != found {
            return Err(Error::Config(format!("checkpoint store {name:?} does not match the model's parameters")));
        }
        target.load(tensors.clone())
    }
}

/// Write atomically (temporary file, then rename).
pub fn write_checkpoint(path: &Path, meta: &serde_json::Value, stores: &[(&str, &ParamStore)]) -> Result<()> {
    let header = Header {
        stores: stores
            .iter()
            .map(|(name, s)| StoreEntry {
                name: name.to_string(),
                params: s.iter().map(|(n, t)| ParamEntry { name: n.to_string(), shape: t.shape().to_vec() }).collect(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let hjson = serde_json::to_vec(&header)?;
    let total: usize = stores.iter().map(|(_, s)| s.num_scalars()).sum();
    let mut buf = Vec::with_capacity(16 + hjson.len() + 8 * total);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
    buf.extend_from_slice(&hjson);
    for (_, s) in stores {
        for (_, t) in s.iter() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::File::create(&tmp)?.write_all(&buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::Format { path: path.to_path_buf(), msg: msg.to_string() };
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut payload = bytes[16 + hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut stores = Vec::with_capacity(header.stores.len());
    for entry in header.stores {
        let mut tensors = Vec::with_capacity(entry.params.len());
        for p in &entry.params {
            let n: usize = p.shape.iter().product();
            let data: Vec<f64> = payload.by_ref().take(n).collect();
            if data.len() != n {
                return Err(bad("truncated payload"));
            }
            tensors.push(Tensor::new(p.shape.clone(), data)?);
        }
        stores.push((entry, tensors));
    }
    if payload.next().is_some() || (bytes.len() - 16 - hlen) % 8 != 0 {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(Checkpoint { meta: header.meta, stores })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new([2, 2], vec![1.0, -0.1, f64::MIN_POSITIVE, 3.5e300]).unwrap());
        s.add("b", Tensor::new([3], vec![0.0, 1.0 / 3.0, -2.0]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.rpck");
        write_checkpoint(&path, &serde_json::json!({"k": 1}), &[("m", &s)]).unwrap();
        let ck = read_checkpoint(&path).unwrap();
        assert_eq!(ck.meta["k"], 1);
        let mut t = s.clone();
        for id in t.ids().collect::<Vec<_>>() {
            *t.get_mut(id) = Tensor::zeros(s.get(id).shape().to_vec());
        }
        ck.restore("m", &mut t).unwrap();
        assert!(t.same_weights(&s));
        assert!(ck.restore("missing", &mut t).is_err());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.rpck");
        fs::write(&path, b"RPCKjunk").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
