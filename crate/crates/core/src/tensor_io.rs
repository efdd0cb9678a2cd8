//! `ISACTNSR` tensor dumps: magic, u32 rank, u32 dims, then f32 values, all little-endian.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{config, Result};

pub const MAGIC: &[u8; 8] = b"ISACTNSR";

pub fn encode(dims: &[usize], values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn encode_matrix(m: &Array2<f64>) -> Vec<u8> {
    encode(&[m.nrows(), m.ncols()], m.iter().cloned())
}

pub fn write<W: Write>(mut w: W, dims: &[usize], values: impl IntoIterator<Item = f64>) -> Result<()> {
    w.write_all(&encode(dims, values))?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<ArrayD<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn decode(bytes: &[u8]) -> Result<ArrayD<f32>> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return config("not an ISACTNSR tensor");
    }
    let u32_at = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| crate::IsacError::Config("truncated tensor header".into()))
    };
    let rank = u32_at(8)? as usize;
    let dims: Vec<usize> = (0..rank).map(|i| u32_at(12 + 4 * i).map(|d| d as usize)).collect::<Result<_>>()?;
    let start = 12 + 4 * rank;
    let count: usize = dims.iter().product();
    let Some(data) = bytes.get(start..start + 4 * count) else {
        return config("truncated tensor data");
    };
    if bytes.len() != start + 4 * count {
        return config("trailing bytes after tensor data");
    }
    let values = data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| crate::IsacError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let m = Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64 * 0.5);
        let bytes = encode_matrix(&m);
        assert_eq!(&bytes[..8], b"ISACTNSR");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        let back = decode(&bytes).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        assert_eq!(back[[1, 2]], 2.5);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"NOTATENSOR__").is_err());
    }
}
