//! Binary PPM (`P6`) and PGM (`P5`) with maxval 255.
//!
//! Pixels map to `[0, 1]` by `/255`; writing clamps and rounds `255·x`.
//! Grayscale files are replicated to three channels on read.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "PPM";

fn fail<T>(offset: usize, reason: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        format: FORMAT,
        offset,
        reason: reason.into(),
    })
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return fail(start, format!("expected {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map_or_else(|| fail(start, format!("{what} out of range")), Ok)
    }
}

/// Parses a P6 or P5 file into a `3×H×W` tensor.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return fail(0, "expected magic P6 or P5"),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let max_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return fail(max_at, format!("unsupported maxval {maxval} (only 255)"));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return fail(h.pos, "expected one whitespace byte before the pixel data"),
    }
    if width == 0 || height == 0 {
        return fail(2, "zero image extent");
    }
    let need = width * height * channels;
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        return fail(
            h.pos + payload.len(),
            format!("truncated payload: {} of {need} bytes", payload.len()),
        );
    }
    let plane = width * height;
    Tensor::new(
        vec![3, height, width],
        (0..3 * plane)
            .map(|i| {
                let (c, p) = (i / plane, i % plane);
                let src = if channels == 3 { p * 3 + c } else { p };
                payload[src] as f64 / 255.0
            })
            .collect(),
    )
}

/// Encodes a `3×H×W` tensor as P6.
pub fn encode_ppm(img: &Tensor<f64>) -> Result<Vec<u8>> {
    let [3, height, width] = *img.shape() else {
        return Err(Error::InvalidShape {
            shape: img.shape().to_vec(),
            reason: "PPM output needs a 3×H×W image".into(),
        });
    };
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    let plane = width * height;
    let d = img.data();
    out.reserve(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            out.push((255.0 * d[c * plane + p].clamp(0.0, 1.0)).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Tensor<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn write_image(path: &Path, img: &Tensor<f64>) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}
