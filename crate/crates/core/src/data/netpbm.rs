//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::fs;
use std::path::Path;

use super::{DataError, Result};
use crate::engine::{IntMask, Tensor};

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    let bad = |msg: &str| DataError::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad(&format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header field out of range"))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(bad("missing separator after header"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(bad("zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad(&format!("unsupported maxval {maxval}")));
    }
    Ok(Header { width, height, maxval, offset: pos + 1 })
}

fn raster<'a>(bytes: &'a [u8], h: &Header, channels: usize, path: &Path) -> Result<&'a [u8]> {
    let n = h.width * h.height * channels;
    bytes
        .get(h.offset..h.offset + n)
        .ok_or_else(|| DataError::Format(format!("{}: truncated raster", path.display())))
}

/// Reads an RGB image as a `[3, H, W]` tensor with values `byte / maxval`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let h = parse_header(&bytes, b"P6", path)?;
    let px = raster(&bytes, &h, 3, path)?;
    let plane = h.width * h.height;
    let mut data = vec![0.0f32; 3 * plane];
    let scale = h.maxval as f32;
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = rgb[c] as f32 / scale;
        }
    }
    Ok(Tensor::new(vec![3, h.height, h.width], data)?)
}

/// Quantises a `[3, H, W]` image in `[0, 1]` to bytes and writes it as P6.
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let (c, height, width) = match img.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(DataError::Format(format!("PPM needs [3, H, W], got {s:?}"))),
    };
    if c != 3 {
        return Err(DataError::Format(format!("PPM needs 3 channels, got {c}")));
    }
    let plane = height * width;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            out.push(to_byte(img.data()[ch * plane + i]));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a P5 label map; gray values are class ids.
pub fn read_pgm(path: &Path) -> Result<IntMask> {
    let bytes = fs::read(path)?;
    let h = parse_header(&bytes, b"P5", path)?;
    let px = raster(&bytes, &h, 1, path)?;
    Ok(IntMask::new(h.height, h.width, px.to_vec())?)
}

pub fn write_pgm(path: &Path, mask: &IntMask) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend_from_slice(mask.data());
    fs::write(path, out)?;
    Ok(())
}
