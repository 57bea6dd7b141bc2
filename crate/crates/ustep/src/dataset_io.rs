//! `USTP1` dataset files.
//!
//! ```text
//! "USTP1"  u8 version=1  u32 N  u32 L  u32 C  u32 H  u32 W
//! N·L·C·H·W × f32      (sequence, frame, channel, row, col)
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use sha2::{Digest, Sha256};
use ustep_core::data::Dataset;

use crate::bytes::{read_file, write_file, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"USTP1";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 5 + 1 + 5 * 4;

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let dims = [ds.num_sequences, ds.seq_len, ds.channels, ds.height, ds.width];
    let mut out = Vec::with_capacity(HEADER_LEN + ds.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Config(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &ds.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a dataset; `path` is only used to label errors.
pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let mut r = Reader::new(bytes, path);
    r.magic(MAGIC)?;
    let at = r.offset();
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(r.error_at(at, format!("unsupported version {version}, expected {VERSION}")));
    }
    let dims_at = r.offset();
    let mut dims = [0usize; 5];
    for (d, name) in dims.iter_mut().zip(["N", "L", "C", "H", "W"]) {
        *d = r.u32(name)? as usize;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| r.error_at(dims_at, format!("dimensions {dims:?} overflow")))?;
    if dims.contains(&0) {
        return Err(r.error_at(dims_at, format!("dimensions {dims:?} must all be positive")));
    }
    let data_at = r.offset();
    let data = r.f32s(count, "pixel data")?;
    r.finish()?;
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(r.error_at(data_at + 4 * i as u64, format!("non-finite pixel {}", data[i])));
    }
    let [n, l, c, h, w] = dims;
    Ok(Dataset::new(n, l, c, h, w, data)?)
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_file(path, &encode_dataset(ds)?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&read_file(path)?, path)
}

/// A dataset together with the SHA-256 of its file, for report provenance.
pub fn read_dataset_hashed(path: &Path) -> Result<(Dataset, String)> {
    let bytes = read_file(path)?;
    let ds = decode_dataset(&bytes, path)?;
    Ok((ds, sha256_hex(&bytes)))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ustep_core::data::{generate, GenConfig};

    fn small() -> Dataset {
        generate(&GenConfig {
            num_sequences: 3,
            height: 8,
            width: 8,
            object_size: 2,
            ..GenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = small();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 3 * 8 * 64 * 4);
        let back = decode_dataset(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.data, ds.data);
        assert_eq!(
            (back.num_sequences, back.seq_len, back.channels, back.height, back.width),
            (3, 8, 1, 8, 8)
        );
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode_dataset(&small()).unwrap();
        bytes[..5].copy_from_slice(b"USTC1");
        let e = decode_dataset(&bytes, Path::new("d")).unwrap_err();
        assert!(matches!(e, Error::Format { offset: 0, .. }));
        assert!(e.to_string().contains("expected \"USTP1\""), "{e}");
    }

    #[test]
    fn truncated_data() {
        let bytes = encode_dataset(&small()).unwrap();
        let e = decode_dataset(&bytes[..bytes.len() - 3], Path::new("d")).unwrap_err();
        assert!(matches!(e, Error::Format { offset, .. } if offset == HEADER_LEN as u64));
        assert!(e.to_string().contains("truncated pixel data"), "{e}");
        let e = decode_dataset(&bytes[..10], Path::new("d")).unwrap_err();
        assert!(e.to_string().contains("truncated"), "{e}");
    }

    #[test]
    fn overflowing_header() {
        let mut bytes = encode_dataset(&small()).unwrap();
        for i in 0..5 {
            bytes[6 + 4 * i..10 + 4 * i].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        let e = decode_dataset(&bytes, Path::new("d")).unwrap_err();
        assert!(matches!(e, Error::Format { offset: 6, .. }), "{e}");
    }

    #[test]
    fn unknown_version_and_trailing_bytes() {
        let mut bytes = encode_dataset(&small()).unwrap();
        bytes[5] = 2;
        assert!(matches!(decode_dataset(&bytes, Path::new("d")), Err(Error::Format { offset: 5, .. })));
        bytes[5] = 1;
        bytes.push(0);
        assert!(decode_dataset(&bytes, Path::new("d")).is_err());
    }

    #[test]
    fn hash_is_hex_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
