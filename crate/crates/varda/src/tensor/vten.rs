//! VTEN: a minimal binary container for one dense tensor.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size          field
//! 0       4             magic "VTEN"
//! 4       1             dtype code (1 = f32, 2 = f64)
//! 5       1             rank (0..=8)
//! 6       4 * rank      extents, u32 each, all nonzero
//! ...     width * numel payload, row-major
//! ```
//!
//! Decoding is total: every malformed input maps to a [`FormatError`], sizes
//! are checked before any allocation, and trailing bytes are rejected. Files
//! written by an f32 build read back losslessly in an f64 build; the reverse
//! direction rounds.

use std::io::Write;
use std::path::Path;

use super::{Tensor, TensorError};
use crate::Real;

pub const MAGIC: [u8; 4] = *b"VTEN";
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;
pub const MAX_RANK: u8 = 8;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, got {got:?}")]
    BadMagic { expected: [u8; 4], got: [u8; 4] },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("rank {0} exceeds maximum {MAX_RANK}")]
    BadRank(u8),
    #[error("zero extent at axis {axis}")]
    ZeroExtent { axis: usize },
    #[error("extents overflow the addressable size")]
    Overflow,
    #[error("truncated: need {need} bytes, got {got}")]
    Truncated { need: usize, got: usize },
    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },
    #[error("tensor: {0}")]
    Tensor(#[from] TensorError),
}

fn dtype_width(code: u8) -> Result<usize, FormatError> {
    match code {
        DTYPE_F32 => Ok(4),
        DTYPE_F64 => Ok(8),
        other => Err(FormatError::UnknownDtype(other)),
    }
}

/// Serialize in the active build's dtype.
pub fn encode(t: &Tensor) -> Vec<u8> {
    let shape = t.shape();
    let data = t.data();
    let width = std::mem::size_of::<Real>();
    let mut out = Vec::with_capacity(6 + 4 * shape.len() + width * data.len());
    out.extend_from_slice(&MAGIC);
    out.push(crate::REAL_DTYPE);
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decode one tensor from the front of `bytes`; returns the tensor and the
/// number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor, usize), FormatError> {
    if bytes.len() < 6 {
        return Err(FormatError::Truncated { need: 6, got: bytes.len() });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[..4]);
    if magic != MAGIC {
        return Err(FormatError::BadMagic { expected: MAGIC, got: magic });
    }
    let dtype = bytes[4];
    let width = dtype_width(dtype)?;
    let rank = bytes[5];
    if rank > MAX_RANK {
        return Err(FormatError::BadRank(rank));
    }
    let rank = rank as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(FormatError::Truncated { need: header, got: bytes.len() });
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for axis in 0..rank {
        let mut ext = [0u8; 4];
        ext.copy_from_slice(&bytes[6 + 4 * axis..10 + 4 * axis]);
        let e = u32::from_le_bytes(ext) as usize;
        if e == 0 {
            return Err(FormatError::ZeroExtent { axis });
        }
        numel = numel.checked_mul(e).ok_or(FormatError::Overflow)?;
        shape.push(e);
    }
    let payload = numel.checked_mul(width).ok_or(FormatError::Overflow)?;
    let total = header.checked_add(payload).ok_or(FormatError::Overflow)?;
    if bytes.len() < total {
        return Err(FormatError::Truncated { need: total, got: bytes.len() });
    }
    let raw = &bytes[header..total];
    let mut data = Vec::with_capacity(numel);
    match dtype {
        DTYPE_F32 => {
            for chunk in raw.chunks_exact(4) {
                let mut b = [0u8; 4];
                b.copy_from_slice(chunk);
                data.push(f32::from_le_bytes(b) as Real);
            }
        }
        DTYPE_F64 => {
            for chunk in raw.chunks_exact(8) {
                let mut b = [0u8; 8];
                b.copy_from_slice(chunk);
                data.push(f64::from_le_bytes(b) as Real);
            }
        }
        _ => unreachable!("width already validated"),
    }
    let t = Tensor::from_vec(&shape, data)?;
    Ok((t, total))
}

/// Decode a byte buffer that must contain exactly one tensor.
pub fn decode(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(FormatError::TrailingBytes { extra: bytes.len() - used });
    }
    Ok(t)
}

pub fn write_file(path: &Path, t: &Tensor) -> Result<(), FormatError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Tensor, FormatError> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let t =
            Tensor::from_vec(&[2, 3], vec![0.1, -2.5, 1e-300, 3.7e12, -0.0, 42.0]).unwrap();
        let bytes = encode(&t);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.shape(), t.shape());
        let (a, b) = (t.to_vec(), back.to_vec());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn scalar_rank_zero_roundtrip() {
        let t = Tensor::scalar(6.25);
        let back = decode(&encode(&t)).unwrap();
        assert_eq!(back.shape(), &[] as &[usize]);
        assert_eq!(back.item(), 6.25);
    }

    #[test]
    fn malformed_inputs_error_not_panic() {
        assert!(matches!(decode(b""), Err(FormatError::Truncated { .. })));
        assert!(matches!(decode(b"NOPE\x02\x00"), Err(FormatError::BadMagic { .. })));
        assert!(matches!(decode(b"VTEN\x09\x00"), Err(FormatError::UnknownDtype(9))));
        assert!(matches!(decode(b"VTEN\x02\x09"), Err(FormatError::BadRank(9))));

        // Rank 1, extent 0.
        let mut zero_ext = b"VTEN\x02\x01".to_vec();
        zero_ext.extend_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode(&zero_ext), Err(FormatError::ZeroExtent { axis: 0 })));

        // Huge extents must fail by arithmetic, not allocation.
        let mut huge = b"VTEN\x02\x08".to_vec();
        for _ in 0..8 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode(&huge), Err(FormatError::Overflow)));

        // Payload shorter than the header promises.
        let mut short = b"VTEN\x02\x01".to_vec();
        short.extend_from_slice(&4u32.to_le_bytes());
        short.extend_from_slice(&[0u8; 8]);
        assert!(matches!(decode(&short), Err(FormatError::Truncated { .. })));

        // Trailing garbage.
        let t = Tensor::scalar(1.0);
        let mut noisy = encode(&t);
        noisy.push(0);
        assert!(matches!(decode(&noisy), Err(FormatError::TrailingBytes { extra: 1 })));
    }

    #[test]
    fn f32_payload_reads_in_any_build() {
        let mut bytes = b"VTEN\x01\x01".to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-0.25f32).to_le_bytes());
        let t = decode(&bytes).unwrap();
        assert_eq!(t.to_vec(), vec![1.5, -0.25]);
    }
}
