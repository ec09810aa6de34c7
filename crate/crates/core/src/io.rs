//! Binary file formats.
//!
//! Matrix file (`PYRM`): magic, `u32` version, `u64` rows, `u64` cols, then
//! `rows·cols` little-endian `f64` values in row-major order.
//!
//! Model file (`PYRB`): magic, `u32` version, seven `u64` header fields
//! (layers, heads, dim, ffn, max_len, head kind with 0 = classification and
//! 1 = regression, output count), then every parameter tensor in
//! [`EncoderStack::tensors`] order as raw little-endian `f64` values. Tensor
//! shapes follow from the header.

use std::io::{Read, Write};
use std::path::Path;

use crate::encoder::{EncoderStack, Head, StackDims};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MATRIX_MAGIC: &[u8; 4] = b"PYRM";
pub const MODEL_MAGIC: &[u8; 4] = b"PYRB";
pub const FORMAT_VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_u32(b: &[u8], at: &mut usize) -> Result<u32> {
    let s = b.get(*at..*at + 4).ok_or_else(|| format_err("truncated header"))?;
    *at += 4;
    Ok(u32::from_le_bytes(s.try_into().expect("4 bytes")))
}

fn read_u64(b: &[u8], at: &mut usize) -> Result<u64> {
    let s = b.get(*at..*at + 8).ok_or_else(|| format_err("truncated header"))?;
    *at += 8;
    Ok(u64::from_le_bytes(s.try_into().expect("8 bytes")))
}

fn read_dim(b: &[u8], at: &mut usize) -> Result<usize> {
    usize::try_from(read_u64(b, at)?).map_err(|_| format_err("dimension does not fit in memory"))
}

fn check_magic(b: &[u8], magic: &[u8; 4]) -> Result<usize> {
    if b.get(..4) != Some(&magic[..]) {
        return Err(format_err(format!("missing {} magic bytes", String::from_utf8_lossy(magic))));
    }
    let mut at = 4;
    let v = read_u32(b, &mut at)?;
    if v != FORMAT_VERSION {
        return Err(format_err(format!("unsupported version {v}")));
    }
    Ok(at)
}

fn push_floats(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_floats(b: &[u8], at: &mut usize, count: usize) -> Result<Vec<f64>> {
    let bytes = count.checked_mul(8).ok_or_else(|| format_err("payload size overflows"))?;
    let s = b.get(*at..*at + bytes).ok_or_else(|| format_err("payload shorter than declared"))?;
    *at += bytes;
    Ok(s.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * m.as_slice().len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    push_floats(&mut out, m.as_slice());
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    let mut at = check_magic(bytes, MATRIX_MAGIC)?;
    let rows = read_dim(bytes, &mut at)?;
    let cols = read_dim(bytes, &mut at)?;
    let count = rows.checked_mul(cols).ok_or_else(|| format_err("matrix size overflows"))?;
    let data = read_floats(bytes, &mut at, count)?;
    if at != bytes.len() {
        return Err(format_err(format!("{} trailing bytes after matrix payload", bytes.len() - at)));
    }
    Matrix::new(rows, cols, data).map_err(|e| format_err(e.to_string()))
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_matrix(m))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let mut b = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut b)?;
    decode_matrix(&b)
}

pub fn encode_model(stack: &EncoderStack) -> Vec<u8> {
    let d = stack.dims;
    let mut out = Vec::with_capacity(64 + 8 * stack.parameter_count());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let (kind, outputs) = match d.head {
        Head::Classification { classes } => (0u64, classes as u64),
        Head::Regression => (1, 1),
    };
    for v in [d.layers as u64, d.heads as u64, d.dim as u64, d.ffn as u64, d.max_len as u64, kind, outputs] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for t in stack.tensors() {
        push_floats(&mut out, t.as_slice());
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<EncoderStack> {
    let mut at = check_magic(bytes, MODEL_MAGIC)?;
    let mut h = [0usize; 7];
    for v in h.iter_mut() {
        *v = read_dim(bytes, &mut at)?;
    }
    let head = match h[5] {
        0 => Head::Classification { classes: h[6] },
        1 if h[6] == 1 => Head::Regression,
        k => return Err(format_err(format!("unknown head kind {k} with {} outputs", h[6]))),
    };
    let dims = StackDims { layers: h[0], heads: h[1], dim: h[2], ffn: h[3], max_len: h[4], head };
    // reject absurd headers before allocating tensors for them
    let mut expected: usize = 0;
    for x in [dims.max_len * dims.dim, dims.dim * dims.dim * 4 + dims.dim * dims.ffn * 2] {
        expected = expected.saturating_add(x);
    }
    if expected.saturating_mul(8) > bytes.len() {
        return Err(format_err("payload shorter than declared"));
    }
    let mut stack = EncoderStack::zeros(dims).map_err(|e| format_err(e.to_string()))?;
    for t in stack.tensors_mut() {
        let n = t.as_slice().len();
        let v = read_floats(bytes, &mut at, n)?;
        t.as_mut_slice().copy_from_slice(&v);
    }
    if at != bytes.len() {
        return Err(format_err(format!("{} trailing bytes after model payload", bytes.len() - at)));
    }
    Ok(stack)
}

pub fn write_model(path: &Path, stack: &EncoderStack) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_model(stack))?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<EncoderStack> {
    let mut b = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut b)?;
    decode_model(&b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_layout_is_exact() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, -0.5]]).unwrap();
        let b = encode_matrix(&m);
        assert_eq!(&b[..4], b"PYRM");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &2u64.to_le_bytes());
        assert_eq!(&b[24..32], &1.0f64.to_le_bytes());
        assert_eq!(&b[48..56], &(-0.5f64).to_le_bytes());
        assert_eq!(b.len(), 24 + 32);
        assert_eq!(decode_matrix(&b).unwrap(), m);
    }

    #[test]
    fn matrix_size_mismatch_is_rejected() {
        let m = Matrix::zeros(3, 2);
        let mut b = encode_matrix(&m);
        assert!(decode_matrix(&b[..b.len() - 1]).is_err());
        b.push(0);
        assert!(decode_matrix(&b).is_err());
        let mut wrong = encode_matrix(&m);
        wrong[0] = b'X';
        assert!(decode_matrix(&wrong).is_err());
        let mut version = encode_matrix(&m);
        version[4] = 9;
        assert!(decode_matrix(&version).is_err());
        let mut huge = encode_matrix(&m);
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_matrix(&huge).is_err());
    }

    #[test]
    fn model_round_trip() {
        let dims = StackDims { layers: 2, heads: 2, dim: 4, ffn: 6, max_len: 5, head: Head::Classification { classes: 3 } };
        let s = EncoderStack::random(dims, 9).unwrap();
        let b = encode_model(&s);
        assert_eq!(&b[..4], b"PYRB");
        assert_eq!(b.len(), 8 + 7 * 8 + 8 * s.parameter_count());
        assert_eq!(decode_model(&b).unwrap(), s);
        let r = EncoderStack::random(StackDims { head: Head::Regression, ..dims }, 1).unwrap();
        assert_eq!(decode_model(&encode_model(&r)).unwrap(), r);
        assert!(decode_model(&b[..b.len() - 8]).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pyrm");
        let m = Matrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 / 7.0);
        write_matrix(&p, &m).unwrap();
        assert_eq!(read_matrix(&p).unwrap(), m);
        assert!(matches!(read_matrix(&dir.path().join("missing")), Err(Error::Io(_))));
    }
}
