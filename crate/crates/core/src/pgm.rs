//! PGM (portable graymap) reading and writing.
//!
//! Both the binary `P5` and ASCII `P2` variants are read. Only a maximum gray
//! value of 255 is accepted. Output is always `P5`, with intensities clamped
//! to `[0, 255]` and rounded to the nearest integer.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::image::ImageBuffer;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Variant {
    Ascii,
    Binary,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn next_uint(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Pgm(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Pgm(format!("{what} out of range")))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<ImageBuffer> {
    let variant = match bytes.get(..2) {
        Some(b"P5") => Variant::Binary,
        Some(b"P2") => Variant::Ascii,
        _ => return Err(Error::Pgm("missing P5/P2 magic".into())),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.next_uint("width")?;
    let height = cur.next_uint("height")?;
    let maxval = cur.next_uint("maximum gray value")?;
    if maxval != 255 {
        return Err(Error::Pgm(format!(
            "only maximum gray value 255 is supported, found {maxval}"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Pgm(format!("empty image {width}x{height}")));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::Pgm("image too large".into()))?;

    let pixels = match variant {
        Variant::Binary => {
            // exactly one whitespace byte separates the header from the raster
            match bytes.get(cur.pos) {
                Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
                _ => return Err(Error::Pgm("missing header terminator".into())),
            }
            let raster = bytes
                .get(cur.pos..cur.pos + n)
                .ok_or_else(|| Error::Pgm(format!("raster truncated, expected {n} bytes")))?;
            raster.iter().map(|&b| b as f64).collect()
        }
        Variant::Ascii => {
            let mut pixels = Vec::with_capacity(n);
            for i in 0..n {
                let v = cur.next_uint("pixel value").map_err(|_| {
                    Error::Pgm(format!("raster truncated at pixel {i} of {n}"))
                })?;
                if v > 255 {
                    return Err(Error::Pgm(format!("pixel value {v} exceeds 255")));
                }
                pixels.push(v as f64);
            }
            pixels
        }
    };
    ImageBuffer::new(width, height, pixels)
}

/// Binary `P5` encoding with clamp-and-round quantization.
pub fn encode_pgm(img: &ImageBuffer) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", img.width(), img.height());
    let mut out = Vec::with_capacity(header.len() + img.len());
    out.extend_from_slice(header.as_bytes());
    out.extend(img.pixels().iter().map(|&v| quantize(v)));
    out
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    v.clamp(0.0, 255.0).round() as u8
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    write_atomic(path.as_ref(), &encode_pgm(img))
}
