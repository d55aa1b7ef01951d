//! Checkpoint files: a binary parameter blob plus a JSON metadata sidecar
//! stored next to it as `<blob>.json`.
//!
//! Blob layout (little-endian): magic `RGCKPT01`, store count `u32`, then per
//! store an entry count `u64` followed by, per entry, the name (`u32` length +
//! UTF-8), rank `u32`, dims (`u64` each) and values as `f64`.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::data::io::atomic_write;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RGCKPT01";

pub fn sidecar_path(blob: &Path) -> PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_params<T: Scalar>(stores: &[&ParamStore<T>]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(stores.len() as u32).to_le_bytes());
    for store in stores {
        encode_store(store, &mut out);
    }
    out
}

fn encode_store<T: Scalar>(store: &ParamStore<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for e in store.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
        for d in e.value.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in e.value.data() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated parameter blob".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Loads a blob into `stores`, whose entries must match by name, order and shape.
pub fn decode_params<T: Scalar>(bytes: &[u8], stores: &mut [&mut ParamStore<T>]) -> Result<()> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a parameter blob (bad magic)".into()));
    }
    let n = r.u32()? as usize;
    if n != stores.len() {
        return Err(Error::Checkpoint(format!(
            "blob holds {n} parameter sets, expected {}",
            stores.len()
        )));
    }
    for store in stores.iter_mut() {
        decode_store(&mut r, store)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(
            "trailing bytes after parameter blob".into(),
        ));
    }
    Ok(())
}

fn decode_store<T: Scalar>(r: &mut Reader<'_>, store: &mut ParamStore<T>) -> Result<()> {
    let count = r.u64()? as usize;
    if count != store.len() {
        return Err(Error::Checkpoint(format!(
            "blob holds {count} tensors, model has {}",
            store.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for e in store.entries() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        if name != e.name {
            return Err(Error::Checkpoint(format!(
                "expected parameter {}, found {name}",
                e.name
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        values.push(Tensor::from_vec(&shape, data)?);
    }
    store.set_all(values)
}

pub fn save<T: Scalar, M: Serialize>(
    path: &Path,
    stores: &[&ParamStore<T>],
    meta: &M,
) -> Result<()> {
    let json = serde_json::to_string_pretty(meta)?;
    atomic_write(path, &encode_params(stores))?;
    atomic_write(&sidecar_path(path), json.as_bytes())
}

pub fn load_meta<M: DeserializeOwned>(path: &Path) -> Result<M> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_params<T: Scalar>(path: &Path, stores: &mut [&mut ParamStore<T>]) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes, stores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamKind};

    fn store(seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new(seed);
        s.add(
            "a",
            &[2, 3],
            Init::Normal {
                mean: 0.0,
                std: 1.0,
            },
            ParamKind::Weight,
        );
        s.add("b", &[4], Init::Ones, ParamKind::Buffer);
        s
    }

    #[test]
    fn blob_round_trip_is_exact() {
        let src = store(1);
        let mut dst = store(2);
        assert_ne!(src.fingerprint(), dst.fingerprint());
        decode_params(&encode_params(&[&src]), &mut [&mut dst]).unwrap();
        assert_eq!(src.fingerprint(), dst.fingerprint());
    }

    #[test]
    fn mismatches_are_rejected() {
        let bytes = encode_params(&[&store(1)]);
        let mut other = ParamStore::<f64>::new(0);
        other.add("a", &[6], Init::Zeros, ParamKind::Weight);
        other.add("b", &[4], Init::Zeros, ParamKind::Weight);
        assert!(decode_params(&bytes, &mut [&mut other]).is_err());
        assert!(decode_params(&bytes[..bytes.len() - 3], &mut [&mut store(0)]).is_err());
        assert!(decode_params(b"garbage!", &mut [&mut store(0)]).is_err());
        assert!(decode_params(&bytes, &mut [&mut store(0), &mut store(1)]).is_err());
    }

    #[test]
    fn sidecar_sits_next_to_blob() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &[&store(3), &store(4)], &serde_json::json!({"seed": 3})).unwrap();
        assert!(sidecar_path(&p).ends_with("m.ckpt.json"));
        let meta: serde_json::Value = load_meta(&p).unwrap();
        assert_eq!(meta["seed"], 3);
        let (mut a, mut b) = (store(9), store(9));
        load_params(&p, &mut [&mut a, &mut b]).unwrap();
        assert_eq!(a.fingerprint(), store(3).fingerprint());
        assert_eq!(b.fingerprint(), store(4).fingerprint());
    }
}
