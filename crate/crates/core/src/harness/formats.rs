//! Binary containers.
//!
//! Feature file (little-endian):
//!
//! ```text
//! b"GUEF" | u32 version = 1 | u32 D | u32 W | u32 dtype (0 = f32) | D·W f32 row-major
//! ```
//!
//! Checkpoint (little-endian):
//!
//! ```text
//! b"GUEFCKPT" | u32 version = 1 | u32 tensor count
//! per tensor: u32 name length | UTF-8 name | u32 rank | rank × u32 dims | f64 payload
//! ```

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::model::ModelParams;
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"GUEF";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 20;
pub const DTYPE_F32: u32 = 0;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GUEFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_features(t: &Tensor) -> Result<Vec<u8>> {
    let (d, w) = t.dims2()?;
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * d * w);
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [FEATURE_VERSION, to_u32(d)?, to_u32(w)?, DTYPE_F32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Invalid(format!("dimension {v} does not fit in u32")))
}

pub fn decode_features(bytes: &[u8]) -> std::result::Result<Tensor, FormatError> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: FEATURE_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(FormatError::BadMagic(bytes[..4].to_vec()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, d, w, dtype) = (word(0), word(1), word(2), word(3));
    if version != FEATURE_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    if dtype != DTYPE_F32 {
        return Err(FormatError::UnsupportedDtype(dtype));
    }
    let payload = (d as u64)
        .checked_mul(w as u64)
        .and_then(|n| n.checked_mul(4))
        .filter(|n| usize::try_from(*n).is_ok())
        .ok_or(FormatError::ShapeOverflow(vec![d as u64, w as u64]))?;
    let found = (bytes.len() - FEATURE_HEADER_LEN) as u64;
    if found < payload {
        return Err(FormatError::Truncated { expected: payload, found });
    }
    if found > payload {
        return Err(FormatError::Trailing(found - payload));
    }
    let data = bytes[FEATURE_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::matrix(d as usize, w as usize, data).map_err(|e| FormatError::Malformed(e.to_string()))
}

pub fn write_features(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_features(t)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    decode_features(&bytes).map_err(|kind| Error::Format {
        path: path.to_path_buf(),
        kind,
    })
}

pub fn encode_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(params.names().len())?.to_le_bytes());
    for (name, t) in params.named() {
        out.extend_from_slice(&to_u32(name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&to_u32(t.rank())?.to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&to_u32(*d)?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or(
            FormatError::Truncated {
                expected: (self.pos as u64).saturating_add(n as u64),
                found: self.bytes.len() as u64,
            },
        )?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<ModelParams, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(CHECKPOINT_MAGIC.len())?;
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic(magic.to_vec()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut named = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| FormatError::Malformed(e.to_string()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .and_then(|n| n.checked_mul(8).map(|_| n))
            .ok_or_else(|| FormatError::ShapeOverflow(shape.iter().map(|d| *d as u64).collect()))?;
        let payload = r.take(numel * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| FormatError::Malformed(e.to_string()))?;
        named.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(FormatError::Trailing((bytes.len() - r.pos) as u64));
    }
    let dims = ModelParams::infer_dims(&named).map_err(|e| FormatError::Malformed(e.to_string()))?;
    ModelParams::from_named(dims, named).map_err(|e| FormatError::Malformed(e.to_string()))
}

pub fn write_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes).map_err(|kind| Error::Format {
        path: path.to_path_buf(),
        kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use proptest::prelude::*;

    #[test]
    fn feature_file_size() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode_features(&t).unwrap();
        assert_eq!(bytes.len(), 20 + 24);
        assert_eq!(&bytes[..4], b"GUEF");
        assert_eq!(decode_features(&bytes).unwrap(), t);
    }

    #[test]
    fn feature_errors_are_distinct() {
        let t = Tensor::matrix(2, 3, vec![0.5; 6]).unwrap();
        let good = encode_features(&t).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad), Err(FormatError::BadMagic(_))));
        assert!(matches!(
            decode_features(&good[..good.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));
        assert!(matches!(decode_features(&good[..7]), Err(FormatError::Truncated { .. })));

        let mut big = good[..20].to_vec();
        big[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        big[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            decode_features(&big),
            Err(FormatError::ShapeOverflow(_)) | Err(FormatError::Truncated { .. })
        ));

        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(decode_features(&v2), Err(FormatError::UnsupportedVersion(2))));
        let mut f64ty = good.clone();
        f64ty[16] = 1;
        assert!(matches!(decode_features(&f64ty), Err(FormatError::UnsupportedDtype(1))));
        let mut long = good;
        long.push(0);
        assert!(matches!(decode_features(&long), Err(FormatError::Trailing(1))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = ModelParams::init(ModelDims::new(6, 3, 4, 8).unwrap(), 17);
        let bytes = encode_checkpoint(&params).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, params);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(FormatError::Truncated { .. })));
        assert!(matches!(decode_checkpoint(b"NOTACKPT\x01\0\0\0"), Err(FormatError::BadMagic(_))));
    }

    proptest! {
        #[test]
        fn feature_round_trip_is_bit_exact(d in 1usize..6, w in 1usize..9, seed in any::<u64>()) {
            let data: Vec<f64> = (0..d * w)
                .map(|i| (((seed ^ i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40) as f32 / 1e4 - 800.0) as f64)
                .collect();
            let t = Tensor::matrix(d, w, data).unwrap();
            let bytes = encode_features(&t).unwrap();
            let back = decode_features(&bytes).unwrap();
            prop_assert_eq!(&back, &t);
            prop_assert_eq!(encode_features(&back).unwrap(), bytes);
        }
    }
}
