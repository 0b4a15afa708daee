//! `TWB1` tensor container: magic, a `u32` little-endian header length, a
//! UTF-8 JSON header, then the little-endian `f32` payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TWB1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    baked: bool,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Named tensors plus free-form metadata, kept in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub baked: bool,
    pub meta: serde_json::Value,
    tensors: Vec<(String, Tensor)>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(baked: bool, meta: serde_json::Value) -> Self {
        Self {
            baked,
            meta,
            tensors: Vec::new(),
        }
    }

    /// Every parameter of `store` in id order.
    pub fn from_store(store: &ParamStore, baked: bool, meta: serde_json::Value) -> Self {
        let mut ck = Self::new(baked, meta);
        for (_, p) in store.iter() {
            ck.tensors.push((p.name.clone(), p.value.clone()));
        }
        ck
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(err(format!("duplicate tensor name {name:?}")));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| err(format!("missing tensor {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.tensors
    }

    /// Copies every tensor whose name exists in `store` into it. Shapes must
    /// match. Returns how many were copied.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<usize> {
        let mut n = 0;
        for (name, t) in &self.tensors {
            if let Ok(id) = store.id(name) {
                store.set_value(id, t.clone())?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len() * 4;
        }
        let header = serde_json::to_vec(&Header {
            version: VERSION,
            baked: self.baked,
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let hlen = u32::try_from(header.len()).map_err(|_| err("header too large"))?;
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&hlen.to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(err("missing TWB1 magic"));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let payload_start = 8 + hlen;
        if bytes.len() < payload_start {
            return Err(err("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[8..payload_start])?;
        if header.version != VERSION {
            return Err(err(format!("unsupported version {}", header.version)));
        }
        let payload = &bytes[payload_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset {
                return Err(err(format!("tensor {:?} has non-contiguous offset {}", e.name, e.offset)));
            }
            let end = e.offset + 4 * n;
            if end > payload.len() {
                return Err(err(format!("tensor {:?} runs past the payload", e.name)));
            }
            let data = payload[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Tensor::new(&e.shape, data)?));
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(err("trailing bytes after payload"));
        }
        Ok(Self {
            baked: header.baked,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample() -> Checkpoint {
        let mut rng = Rng::new(4);
        let mut ck = Checkpoint::new(false, serde_json::json!({"kind": "test", "d_w": 16}));
        ck.push("a", Tensor::randn(&[2, 3], 1.0, &mut rng)).unwrap();
        ck.push("b.weight", Tensor::randn(&[4, 2, 3, 3], 1.0, &mut rng)).unwrap();
        ck.push("c", Tensor::scalar(-0.0)).unwrap();
        ck
    }

    #[test]
    fn byte_exact_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.get("c").unwrap().data()[0].to_bits(), (-0.0f32).to_bits());
        assert_eq!(back.meta["d_w"], 16);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ck = sample();
        assert!(ck.push("a", Tensor::scalar(1.0)).is_err());
    }
}
