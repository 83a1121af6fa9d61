//! The `GRFTTNSR` tensor container.
//!
//! ```text
//! offset  size      field
//! 0       8         magic "GRFTTNSR"
//! 8       2         version (u16 LE) = 1
//! 10      1         dtype (0 = f32)
//! 11      1         ndim (1..=4)
//! 12      4*ndim    dims (u32 LE each)
//! ...     4*prod    payload, row-major f32 LE
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GRFTTNSR";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
pub const MAX_FILE_RANK: usize = 4;

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() > MAX_FILE_RANK {
        return Err(Error::Format(format!(
            "container holds rank 1..={MAX_FILE_RANK}, tensor has rank {}",
            t.rank()
        )));
    }
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let fail = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 12 {
        return Err(fail("truncated header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    if bytes[10] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {}", bytes[10])));
    }
    let ndim = bytes[11] as usize;
    if !(1..=MAX_FILE_RANK).contains(&ndim) {
        return Err(Error::Format(format!("ndim {ndim} out of range")));
    }
    let header = 12 + 4 * ndim;
    if bytes.len() < header {
        return Err(fail("truncated dims"));
    }
    let dims: Vec<usize> = bytes[12..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail("element count overflows"))?;
    if dims.contains(&0) {
        return Err(fail("zero extent"));
    }
    let payload = &bytes[header..];
    if Some(payload.len()) != count.checked_mul(4) {
        return Err(Error::Format(format!(
            "payload is {} bytes, dims {dims:?} need {}",
            payload.len(),
            count.saturating_mul(4)
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_bits(u32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Tensor::new(dims, data)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}
