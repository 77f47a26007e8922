//! Binary tensor payload.
//!
//! Layout (little-endian):
//! - magic: 8 bytes, `OODBNCH1`
//! - rank: u64
//! - dims: rank * u64
//! - data: f32 * product(dims), row-major

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OODBNCH1";

/// Largest rank accepted on read; guards against garbage headers.
const MAX_RANK: u64 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Payload {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(dims: &[usize], data: &[f32]) -> Vec<u8> {
    let numel: usize = dims.iter().product();
    assert_eq!(numel, data.len(), "payload dims do not match data length");
    let mut out = Vec::with_capacity(16 + dims.len() * 8 + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dims.len() as u64).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(mut r: impl Read, path: &Path) -> Result<Payload> {
    let fmt = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| fmt(format!("truncated header: {e}")))?;
    if &magic != MAGIC {
        return Err(fmt(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let mut u64_buf = [0u8; 8];
    r.read_exact(&mut u64_buf)
        .map_err(|e| fmt(format!("truncated rank: {e}")))?;
    let rank = u64::from_le_bytes(u64_buf);
    if rank == 0 || rank > MAX_RANK {
        return Err(fmt(format!("unsupported rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        r.read_exact(&mut u64_buf)
            .map_err(|e| fmt(format!("truncated dims: {e}")))?;
        dims.push(u64::from_le_bytes(u64_buf) as usize);
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fmt(format!("dims {dims:?} overflow")))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() != numel * 4 {
        return Err(fmt(format!(
            "dims {dims:?} need {} data bytes, file has {}",
            numel * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Payload { dims, data })
}

pub fn write(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode(dims, data))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Payload> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode(BufReader::new(file), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let bytes = encode(&[2, 1], &[1.0, -2.5]);
        assert_eq!(&bytes[..8], b"OODBNCH1");
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &2u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &1u64.to_le_bytes());
        assert_eq!(&bytes[32..36], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[36..40], &(-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 40);
    }

    #[test]
    fn rejects_bad_magic_and_short_data() {
        let p = Path::new("mem");
        let mut bytes = encode(&[3], &[1.0, 2.0, 3.0]);
        bytes.pop();
        assert!(matches!(decode(&bytes[..], p), Err(Error::Format { .. })));
        let mut bad = encode(&[1], &[1.0]);
        bad[0] = b'X';
        assert!(matches!(decode(&bad[..], p), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(rows in 1usize..6, cols in 1usize..6, seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * cols)
                .map(|i| f32::from_bits(seed.wrapping_mul(2_654_435_761).wrapping_add(i as u32 * 7919) & 0x7f7f_ffff))
                .collect();
            let bytes = encode(&[rows, cols], &data);
            let back = decode(&bytes[..], Path::new("mem")).unwrap();
            prop_assert_eq!(back.dims, vec![rows, cols]);
            let a: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
