//! Parameter checkpoint container.
//!
//! Layout, version 1, all integers little-endian, strings as `u32` byte
//! length followed by UTF-8 bytes:
//!
//! ```text
//! magic       8 bytes   "AVCCKPT\0"
//! version     u32       1
//! n_meta      u32       then n_meta × (key: str, value: str), sorted by key
//! n_groups    u32       then per group:
//!   name      str
//!   step      u64       Adam step counter of the group
//!   n_params  u32       then per parameter:
//!     name    str
//!     ndim    u32       then ndim × u64 dimension sizes
//!     value   f64 × N   row-major, N = product of dims
//!     m       f64 × N   Adam first moment
//!     v       f64 × N   Adam second moment
//! ```
//!
//! Encoding is a pure function of the contents, so decode → encode
//! reproduces the original bytes.

use std::collections::BTreeMap;
use std::path::Path;

use super::param::ParamStore;
use super::tensor::Tensor;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AVCCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub groups: Vec<(String, ParamStore)>,
}

impl Checkpoint {
    pub fn group(&self, name: &str) -> Result<&ParamStore> {
        self.groups
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Format(format!("checkpoint has no group {name}")))
    }

    pub fn take_group(&mut self, name: &str) -> Result<ParamStore> {
        let pos = self
            .groups
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no group {name}")))?;
        Ok(self.groups.remove(pos).1)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {key}")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            w.str(k);
            w.str(v);
        }
        w.u32(self.groups.len() as u32);
        for (name, store) in &self.groups {
            w.str(name);
            w.u64(store.step());
            w.u32(store.len() as u32);
            for id in store.ids() {
                let value = store.value(id);
                w.str(store.name(id));
                w.u32(value.shape().len() as u32);
                for &d in value.shape() {
                    w.u64(d as u64);
                }
                let (m, v) = store.moments(id);
                w.f64s(value.data());
                w.f64s(m.data());
                w.f64s(v.data());
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader::new(bytes);
        r.expect(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            let v = r.str()?;
            metadata.insert(k, v);
        }
        let mut groups = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let step = r.u64()?;
            let mut store = ParamStore::new();
            for index in 0..r.u32()? as usize {
                let pname = r.str()?;
                let ndim = r.u32()? as usize;
                let shape: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
                let n: usize = shape.iter().product();
                let value = Tensor::new(shape.clone(), r.f64s(n)?)?;
                let m = Tensor::new(shape.clone(), r.f64s(n)?)?;
                let v = Tensor::new(shape, r.f64s(n)?)?;
                store.add(&pname, value)?;
                store.set_moments(index, m, v);
            }
            store.set_step(step);
            groups.push((name, store));
        }
        r.finish()?;
        Ok(Checkpoint { metadata, groups })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut g = ParamStore::new();
        g.add("enc.w", Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap()).unwrap();
        g.add("enc.b", Tensor::new(vec![2], vec![0.0, -0.0]).unwrap()).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("system".to_string(), "P2".to_string());
        Checkpoint {
            metadata: meta,
            groups: vec![("generator".into(), g)],
        }
    }

    #[test]
    fn truncated_input_is_format_error() {
        let bytes = sample().encode();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::decode(b"NOTACKPT"), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_is_byte_identical(
            vals in proptest::collection::vec(-1e6f64..1e6, 1..24),
            step in 0u64..10_000,
            key in "[a-z]{1,8}",
        ) {
            let mut store = ParamStore::new();
            let n = vals.len();
            store.add("p", Tensor::new(vec![n], vals).unwrap()).unwrap();
            store.set_step(step);
            let mut meta = BTreeMap::new();
            meta.insert(key, "v".to_string());
            let ck = Checkpoint { metadata: meta, groups: vec![("g".into(), store)] };
            let bytes = ck.encode();
            let back = Checkpoint::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode(), bytes);
            prop_assert_eq!(back.group("g").unwrap().step(), step);
        }
    }

    #[test]
    fn sample_roundtrip_preserves_values() {
        let ck = sample();
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        let g = back.group("generator").unwrap();
        assert_eq!(g.get("enc.w").unwrap(), ck.group("generator").unwrap().get("enc.w").unwrap());
        assert_eq!(back.meta("system").unwrap(), "P2");
    }
}
