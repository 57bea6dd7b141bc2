//! `USTC1` checkpoint files.
//!
//! ```text
//! "USTC1"  u8 version  u32 count
//! count × { u16 name_len  name (UTF-8)  u8 ndim  ndim × u32 dim  f32 data }
//! ```
//!
//! Values are stored as `f32`, so saving a store whose values are already
//! `f32`-representable and loading it back is bit-exact.

use std::path::Path;

use ustep_core::{ParamStore, Tensor};

use crate::bytes::{read_file, write_file, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"USTC1";
pub const VERSION: u8 = 1;

pub fn encode_checkpoint(params: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Config(format!("parameter name `{name}` is too long")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ParamStore> {
    let mut r = Reader::new(bytes, path);
    r.magic(MAGIC)?;
    let at = r.offset();
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(r.error_at(at, format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let count = r.u32("parameter count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = r.offset();
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "parameter name")?)
            .map_err(|_| r.error_at(at + 2, "parameter name is not UTF-8"))?
            .to_owned();
        let ndim = r.u8("rank")? as usize;
        let dims_at = r.offset();
        let shape = (0..ndim)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.error_at(dims_at, format!("shape {shape:?} of `{name}` overflows")))?;
        let data = r.f32s(n, &format!("data of `{name}`"))?;
        let tensor = Tensor::new(&shape, data.into_iter().map(f64::from).collect())
            .map_err(|e| r.error_at(dims_at, e.to_string()))?;
        store
            .insert(&name, tensor)
            .map_err(|e| r.error_at(at, e.to_string()))?;
    }
    r.finish()?;
    Ok(store)
}

pub fn save_checkpoint(params: &ParamStore, path: &Path) -> Result<()> {
    write_file(path, &encode_checkpoint(params)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    decode_checkpoint(&read_file(path)?, path)
}

/// Rounds every value to the nearest `f32`, matching what a save/load
/// round trip produces.
pub fn round_to_f32(params: &mut ParamStore) {
    for i in 0..params.len() {
        for v in params.tensor_mut(i).data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::new(&[2, 1, 1, 1], vec![0.5, -1.25]).unwrap()).unwrap();
        s.insert("a.bias", Tensor::new(&[2], vec![3.0, 1e-3_f32 as f64]).unwrap()).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let bytes = encode_checkpoint(&s).unwrap();
        let back = decode_checkpoint(&bytes, Path::new("c")).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_unknown_version() {
        let mut bytes = encode_checkpoint(&store()).unwrap();
        bytes[5] = 9;
        let e = decode_checkpoint(&bytes, Path::new("c")).unwrap_err();
        assert!(e.to_string().contains("unsupported checkpoint version 9"), "{e}");
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let bytes = encode_checkpoint(&store()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, Path::new("c")).unwrap_err().to_string().contains("\"USTC1\""));
        let e = decode_checkpoint(&bytes[..bytes.len() - 1], Path::new("c")).unwrap_err();
        assert!(e.to_string().contains("data of `a.bias`"), "{e}");
    }

    #[test]
    fn rounding_matches_storage() {
        let mut s = store();
        s.tensor_mut(0).data_mut()[0] = 0.1;
        let stored = decode_checkpoint(&encode_checkpoint(&s).unwrap(), Path::new("c")).unwrap();
        round_to_f32(&mut s);
        assert_eq!(s, stored);
    }
}
