//! Binary PPM (P6, maxval 255) images as `[1, 3, H, W]` tensors in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn fmt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

/// Maps a float to an 8-bit level by `round(v·255)` clamped to `[0, 255]`.
pub fn quantize_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Rounds every value to the nearest representable 8-bit level.
pub fn quantize(img: &Tensor) -> Tensor {
    img.map(|v| quantize_u8(v) as f64 / 255.0)
}

/// Reads header tokens, skipping whitespace and `#` comments.
fn header_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&c| c != b'\n') {
                    *pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return fmt_err("PPM header ended early"),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad PPM header field at byte {start}")))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    if !bytes.starts_with(b"P6") {
        return fmt_err("only binary P6 PPM files are supported");
    }
    let mut pos = 2;
    let w = header_token(bytes, &mut pos)?;
    let h = header_token(bytes, &mut pos)?;
    let maxval = header_token(bytes, &mut pos)?;
    if maxval != 255 {
        return fmt_err(format!("PPM maxval must be 255, got {maxval}"));
    }
    if w == 0 || h == 0 {
        return fmt_err("PPM image has zero size");
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return fmt_err("PPM header must end with a single whitespace byte");
    }
    pos += 1;
    let pixels = &bytes[pos..];
    let plane = w * h;
    if pixels.len() != 3 * plane {
        return fmt_err(format!("PPM payload has {} bytes, expected {}", pixels.len(), 3 * plane));
    }
    let mut data = vec![0.0; 3 * plane];
    for (p, rgb) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = rgb[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![1, 3, h, w], data)
}

/// Canonical P6 encoding of a `[1, 3, H, W]` image.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (b, c, h, w) = img.dims4()?;
    if b != 1 || c != 3 {
        return Err(Error::Shape(format!("PPM output needs a single RGB image, got {:?}", img.shape())));
    }
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    let d = img.data();
    for p in 0..plane {
        for c in 0..3 {
            out.push(quantize_u8(d[c * plane + p]));
        }
    }
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let bytes = encode_ppm(img)?;
    std::fs::write(path, bytes).map_err(|source| Error::Io { path: path.display().to_string(), source })
}
