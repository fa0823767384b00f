//! Binary PGM (P5, maxval 255) encoding.

use std::path::Path;

use super::ImageGrid;
use crate::error::{Error, Result};

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

/// Encodes `img` as P5 bytes, mapping `p` to `round(p·255)`.
pub fn encode_pgm(img: &ImageGrid) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", img.width(), img.height());
    let mut out = Vec::with_capacity(header.len() + img.pixels().len());
    out.extend_from_slice(header.as_bytes());
    out.extend(img.pixels().iter().map(|p| quantize_byte(*p)));
    out
}

pub(crate) fn quantize_byte(p: f64) -> u8 {
    (p * 255.0).round().clamp(0.0, 255.0) as u8
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<(usize, usize)> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format_err(start, format!("expected {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        let value = text
            .parse::<usize>()
            .map_err(|_| format_err(start, format!("{what} out of range")))?;
        Ok((value, start))
    }
}

/// Decodes P5 bytes, mapping byte `v` to `v/255`.
pub fn decode_pgm(bytes: &[u8]) -> Result<ImageGrid> {
    if bytes.len() < 2 {
        return Err(format_err(0, "file too short for a magic number"));
    }
    if &bytes[..2] != b"P5" {
        let magic = String::from_utf8_lossy(&bytes[..2]);
        return Err(format_err(0, format!("unsupported magic {magic:?}, expected P5")));
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let (width, w_at) = cur.number("width")?;
    let (height, h_at) = cur.number("height")?;
    let (maxval, m_at) = cur.number("maxval")?;
    if width == 0 {
        return Err(format_err(w_at, "width must be positive"));
    }
    if height == 0 {
        return Err(format_err(h_at, "height must be positive"));
    }
    if maxval != 255 {
        return Err(format_err(m_at, format!("maxval {maxval} unsupported, expected 255")));
    }
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(format_err(cur.pos, "missing whitespace before payload"));
    }
    let start = cur.pos + 1;
    let needed = width
        .checked_mul(height)
        .ok_or_else(|| format_err(w_at, "image dimensions overflow"))?;
    let available = bytes.len() - start;
    if available < needed {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: {available} of {needed} bytes"),
        ));
    }
    let pixels = bytes[start..start + needed]
        .iter()
        .map(|&v| v as f64 / 255.0)
        .collect();
    ImageGrid::new(width, height, pixels)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

/// Writes the image, creating missing parent directories.
pub fn write_pgm(img: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    crate::records::write_bytes(path.as_ref(), &encode_pgm(img))
}
