//! Self-describing binary checkpoints: magic, version, a JSON architecture
//! record, then every named parameter tensor as little-endian `f64`.

use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use super::net::MultiAutoModel;
use super::spec::ModelSpec;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MADCKPT\0";
const VERSION: u32 = 1;

/// Writes `spec` and the tensors of `store` to `path`.
pub fn write_checkpoint<S: Serialize>(path: &Path, kind: &str, spec: &S, store: &ParamStore) -> Result<()> {
    let header = serde_json::to_vec(&serde_json::json!({ "kind": kind, "spec": spec }))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parsed checkpoint: architecture record and named tensors in file order.
pub struct Checkpoint<S> {
    pub spec: S,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<usize, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }
}

pub fn read_checkpoint<S: DeserializeOwned>(path: &Path, kind: &str) -> Result<Checkpoint<S>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let parse = |r: &mut Reader| -> std::result::Result<(serde_json::Value, Vec<(String, Tensor)>), String> {
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint file".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let hlen = r.u64()?;
        let header: serde_json::Value = serde_json::from_slice(r.take(hlen)?).map_err(|e| e.to_string())?;
        let count = r.u64()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| e.to_string())?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64()).collect::<std::result::Result<Vec<_>, _>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("shape overflow")?;
            let data = r
                .take(n.checked_mul(8).ok_or("length overflow")?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name.clone(), Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?));
        }
        if r.pos != r.bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok((header, tensors))
    };
    let (header, tensors) = parse(&mut r).map_err(bad)?;
    if header["kind"] != kind {
        return Err(bad(format!("checkpoint holds a {} model, expected {kind}", header["kind"])));
    }
    let spec = serde_json::from_value(header["spec"].clone()).map_err(|e| bad(e.to_string()))?;
    Ok(Checkpoint { spec, tensors })
}

/// Copies checkpoint tensors into `store`, requiring identical names and
/// shapes in identical order.
pub fn load_into(store: &mut ParamStore, tensors: Vec<(String, Tensor)>, path: &Path) -> Result<()> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if tensors.len() != store.len() {
        return Err(bad(format!("{} tensors, architecture needs {}", tensors.len(), store.len())));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, (name, t)) in ids.into_iter().zip(tensors) {
        if store.name(id) != name || store.get(id).shape() != t.shape() {
            return Err(bad(format!(
                "parameter {name} {:?} does not match {} {:?}",
                t.shape(),
                store.name(id),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}

impl MultiAutoModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, "two-head", self.spec(), self.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint<ModelSpec> = read_checkpoint(path, "two-head")?;
        let mut model = MultiAutoModel::new(ck.spec)?;
        load_into(model.params_mut(), ck.tensors, path)?;
        Ok(model)
    }
}
