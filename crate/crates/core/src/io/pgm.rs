//! Netpbm grayscale images (binary `P5` and ASCII `P2`), scaled to `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn fmt_err(m: impl Into<String>) -> Error {
    Error::Format(m.into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_space_and_comments(&mut self) {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return;
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(fmt_err("truncated or malformed PGM header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt_err("PGM number out of range"))
    }
}

/// Decodes a PGM into a `[1, H, W]` tensor with values `v / maxval`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(fmt_err("not a PGM file"));
    }
    let binary = match bytes[1] {
        b'5' => true,
        b'2' => false,
        _ => return Err(fmt_err("only grayscale P5/P2 PGM is supported")),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let w = cur.number()?;
    let h = cur.number()?;
    let maxval = cur.number()?;
    if w == 0 || h == 0 {
        return Err(fmt_err("PGM has zero extent"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(fmt_err(format!("PGM maxval {maxval} outside 1..=65535")));
    }
    let n = w.checked_mul(h).ok_or_else(|| fmt_err("PGM too large"))?;
    let scale = maxval as f32;
    let mut data = Vec::with_capacity(n);
    if binary {
        if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
            return Err(fmt_err("truncated PGM header"));
        }
        let payload = &bytes[cur.pos + 1..];
        let wide = maxval > 255;
        let need = if wide { n.checked_mul(2) } else { Some(n) };
        if need.is_none_or(|need| payload.len() < need) {
            return Err(fmt_err("truncated PGM payload"));
        }
        for i in 0..n {
            let v = if wide {
                u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]]) as usize
            } else {
                payload[i] as usize
            };
            if v > maxval {
                return Err(fmt_err("PGM sample exceeds maxval"));
            }
            data.push(v as f32 / scale);
        }
    } else {
        for _ in 0..n {
            let v = cur.number()?;
            if v > maxval {
                return Err(fmt_err("PGM sample exceeds maxval"));
            }
            data.push(v as f32 / scale);
        }
    }
    Tensor::new(vec![1, h, w], data)
}

/// Encodes a `[1, H, W]` (or `[H, W]`) tensor as 8-bit `P5`, clamping to `[0, 1]`.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(Error::shape(format!("PGM needs a single-channel image, got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

pub fn write_pgm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(image)?).map_err(|e| Error::io(path, e))
}
