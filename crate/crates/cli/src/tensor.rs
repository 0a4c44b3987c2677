//! Binary tensor files: `DPPT` magic, little-endian `u32` version and rank,
//! `u64` dimensions, then `f64` values in row-major order.

use dppvae_core::Matrix;

use crate::CliError;

pub const TENSOR_MAGIC: &[u8; 4] = b"DPPT";
pub const TENSOR_VERSION: u32 = 1;

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + 8 * m.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix, CliError> {
    let bad = |m: &str| CliError::Data(format!("tensor file: {m}"));
    if bytes.len() < 12 || &bytes[..4] != TENSOR_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    if u32_at(4) != TENSOR_VERSION || u32_at(8) != 2 {
        return Err(bad("unsupported version or rank"));
    }
    if bytes.len() < 28 {
        return Err(bad("truncated header"));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes")) as usize;
    let (rows, cols) = (u64_at(12), u64_at(20));
    let body = &bytes[28..];
    if body.len() != rows * cols * 8 {
        return Err(bad("payload length does not match shape"));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::new(rows, cols, data).map_err(|e| bad(&e.to_string()))
}
