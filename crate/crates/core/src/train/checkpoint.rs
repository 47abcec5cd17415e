//! `MPK1` parameter checkpoints (little-endian):
//!
//! ```text
//! magic "MPK1" | u32 version=1 | u64 config_len | config_len bytes UTF-8 config echo
//! u64 record count, then per record:
//!   u32 name_len | name bytes | u32 ndim | ndim×u64 shape | numel×f32 values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real, Tensor};
use crate::pointcloud::Reader;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MPK1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A decoded checkpoint: the echoed configuration text and the parameters.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: String,
    pub params: ParamStore<f32>,
}

pub fn encode_checkpoint<T: Real>(config: &str, store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    out
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(buf);
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(format_err(0, format!("bad magic {magic:?}, expected \"MPK1\"")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let len = r.u64("config length")? as usize;
    let at = r.pos;
    let config = String::from_utf8(r.take(len, "config echo")?.to_vec())
        .map_err(|_| format_err(at, "config echo is not UTF-8"))?;
    let count = r.u64("record count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let at = r.pos;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| format_err(at, "parameter name is not UTF-8"))?;
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64("shape")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.overflow())?;
        let data = r.f32s(numel, "values")?;
        if params.contains(&name) {
            return Err(format_err(at, format!("duplicate parameter `{name}`")));
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(format_err(r.pos, format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Checkpoint { config, params })
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, config: &str, store: &ParamStore<T>) -> Result<()> {
    fs::write(path, encode_checkpoint(config, store))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::from_rows(&[&[1.0, -2.5], &[0.25, 3.0]]).unwrap());
        s.insert("b", Tensor::vector(vec![7.0]).unwrap());
        s
    }

    #[test]
    fn roundtrip() {
        let bytes = encode_checkpoint("grid_size = 0.2\n", &store());
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.config, "grid_size = 0.2\n");
        assert_eq!(ck.params.value("a.w").unwrap().shape(), &[2, 2]);
        assert_eq!(ck.params.value("a.w").unwrap().data(), &[1.0, -2.5, 0.25, 3.0]);
        assert_eq!(ck.params.value("b").unwrap().data(), &[7.0]);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint("x", &ParamStore::<f32>::new());
        assert_eq!(&bytes[..4], b"MPK1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 1);
        assert_eq!(bytes[16], b'x');
        assert_eq!(bytes.len(), 4 + 4 + 8 + 1 + 8);
    }

    #[test]
    fn rejects_damage() {
        let bytes = encode_checkpoint("cfg", &store());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 4, .. })));
        for cut in [3, 10, 20, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Format { .. })));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mpk");
        save_checkpoint(&path, "c", &store()).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().params.numel(), 5);
    }
}
