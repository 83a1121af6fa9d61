//! Grayscale PFM (`Pf`) with the Middlebury conventions: the scale line's sign
//! encodes endianness (negative = little-endian) and rows run bottom to top.
//!
//! PFM carries no mask. On read, non-finite values are treated as unknown.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::head::DisparityMap;
use crate::tensor::Tensor;

pub fn pfm_header(width: usize, height: usize) -> String {
    format!("Pf\n{width} {height}\n-1.0\n")
}

pub fn encode_pfm(map: &DisparityMap) -> Vec<u8> {
    let (h, w) = (map.height(), map.width());
    let mut out = pfm_header(w, h).into_bytes();
    let v = map.values().data();
    for y in (0..h).rev() {
        for &px in &v[y * w..(y + 1) * w] {
            out.extend_from_slice(&px.to_bits().to_le_bytes());
        }
    }
    out
}

/// Reads one whitespace-delimited header token starting at `*pos`.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PFM header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::Format("non-ASCII PFM header".into()))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<DisparityMap> {
    let mut pos = 0;
    match token(bytes, &mut pos)? {
        "Pf" => {}
        "PF" => return Err(Error::Format("color PFM (PF) is not supported".into())),
        other => return Err(Error::Format(format!("bad PFM magic {other:?}"))),
    }
    let parse_dim = |s: &str| -> Result<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::Format(format!("bad PFM dimension {s:?}")))
    };
    let w = parse_dim(token(bytes, &mut pos)?)?;
    let h = parse_dim(token(bytes, &mut pos)?)?;
    let scale: f64 = token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Format("bad PFM scale".into()))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Format("PFM scale must be non-zero".into()));
    }
    // exactly one whitespace byte separates the scale from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("truncated PFM header".into()));
    }
    pos += 1;
    let n = w.checked_mul(h).ok_or_else(|| Error::Format("PFM too large".into()))?;
    let payload = &bytes[pos..];
    if Some(payload.len()) != n.checked_mul(4) {
        return Err(Error::Format(format!(
            "PFM payload is {} bytes, expected {}",
            payload.len(),
            n.saturating_mul(4)
        )));
    }
    let little = scale < 0.0;
    let mut data = vec![0f32; n];
    for (i, c) in payload.chunks_exact(4).enumerate() {
        let raw = [c[0], c[1], c[2], c[3]];
        let bits = if little { u32::from_le_bytes(raw) } else { u32::from_be_bytes(raw) };
        let (row, col) = (i / w, i % w);
        data[(h - 1 - row) * w + col] = f32::from_bits(bits);
    }
    let mask = data.iter().map(|v| v.is_finite()).collect();
    DisparityMap::new(Tensor::new(vec![h, w], data)?, mask)
}

pub fn write_pfm(map: &DisparityMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pfm(map)).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<DisparityMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes)
}
