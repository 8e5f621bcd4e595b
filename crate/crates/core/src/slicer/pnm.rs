//! Binary netpbm codec: P6 for RGB, P5 for grayscale, 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{atomic_write, read_bytes};

use super::ImageBuffer;

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        format: "PNM",
        detail: detail.into(),
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels() == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("expected a number at byte {start}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ImageBuffer> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(bad("only binary P5/P6 files are supported")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number()?;
    let height = h.number()?;
    let maxval = h.number()?;
    if maxval == 0 || maxval > 255 {
        return Err(bad(format!("maxval {maxval} unsupported (8-bit only)")));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after maxval"));
    }
    let raster = &bytes[h.pos + 1..];
    let n = width * height * channels;
    if raster.len() < n {
        return Err(bad(format!(
            "raster has {} bytes, expected {n}",
            raster.len()
        )));
    }
    let scale = maxval as f64;
    ImageBuffer::new(
        height,
        width,
        channels,
        raster[..n]
            .iter()
            .map(|&b| (b as f64 / scale).min(1.0))
            .collect(),
    )
}

pub fn write(path: &Path, img: &ImageBuffer) -> Result<()> {
    atomic_write(path, &encode(img))
}

pub fn read(path: &Path) -> Result<ImageBuffer> {
    decode(&read_bytes(path)?)
}
