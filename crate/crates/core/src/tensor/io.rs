//! `.ten` binary tensor files.
//!
//! Layout: magic `CADC`, `u8` version (1), `u8` dtype (0 = f32), `u8` ndim,
//! `u8` reserved (0), `ndim` little-endian `u32` dimensions, then the
//! row-major little-endian payload.

use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 4] = b"CADC";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, DTYPE_F32, t.rank() as u8, 0]);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
    }
    out
}

pub fn decode<T: Real>(bytes: &[u8]) -> std::result::Result<Tensor<T>, String> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err("missing CADC magic".into());
    }
    let (version, dtype, ndim, reserved) = (bytes[4], bytes[5], bytes[6] as usize, bytes[7]);
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    if dtype != DTYPE_F32 {
        return Err(format!("unsupported dtype {dtype}"));
    }
    if reserved != 0 {
        return Err("reserved byte must be 0".into());
    }
    let header = 8 + 4 * ndim;
    if bytes.len() < header {
        return Err("truncated shape header".into());
    }
    let shape: Vec<usize> =
        bytes[8..header].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    let n: usize = shape.iter().product();
    if bytes.len() != header + 4 * n {
        return Err(format!("payload holds {} bytes, shape {shape:?} needs {}", bytes.len() - header, 4 * n));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap())
        .collect();
    Tensor::new(&shape, data).map_err(|e| e.to_string())
}

pub fn write<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fsutil::atomic_write(path, &encode(t))
}

pub fn read<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fsutil::read(path)?;
    decode(&bytes).map_err(|msg| Error::format(path, msg))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(&[2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..8], b"CADC\x01\x00\x02\x00");
        assert_eq!(&b[8..16], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(decode::<f32>(b"NOPE\x01\x00\x00\x00").is_err());
        let mut b = encode(&Tensor::<f32>::zeros(&[3]));
        b.pop();
        assert!(decode::<f32>(&b).is_err());
        let mut b = encode(&Tensor::<f32>::zeros(&[3]));
        b[5] = 7;
        assert!(decode::<f32>(&b).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let t = Tensor::<f32>::from_fn(&shape, |i| (i as f32 + seed as f32).sin() * 1e3);
            let back: Tensor<f32> = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
