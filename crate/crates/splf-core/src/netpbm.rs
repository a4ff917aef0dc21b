//! Minimal binary netpbm reader/writer: P6 color images and P5 grayscale
//! maps, 8-bit only. Pixel values map to [0, 1] floats; writing quantizes
//! with round-half-up so 0.5 lands on byte 128 and exact 0/1 round-trip.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

fn quantize(v: f32) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes a planar [3, h, w] image in [0, 1] as binary P6.
pub fn write_ppm(path: &Path, data: &[f32], h: usize, w: usize) -> Result<()> {
    assert_eq!(data.len(), 3 * h * w, "planar rgb size mismatch");
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            out.push(quantize(data[c * h * w + i]));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes an [h, w] map in [0, 1] as binary P5.
pub fn write_pgm(path: &Path, data: &[f32], h: usize, w: usize) -> Result<()> {
    assert_eq!(data.len(), h * w, "gray size mismatch");
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(data.iter().map(|&v| quantize(v)));
    fs::write(path, out)?;
    Ok(())
}

/// Header scanner: whitespace-separated decimal tokens, with `#` comments
/// running to end of line. Returns the token and the index just past it.
fn next_token(bytes: &[u8], mut pos: usize, path: &Path) -> Result<(usize, usize)> {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        break;
    }
    let start = pos;
    while pos < bytes.len() && bytes[pos].is_ascii_digit() {
        pos += 1;
    }
    if pos == start {
        return Err(Error::Image(format!("{}: malformed header", path.display())));
    }
    let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ascii");
    let value: usize = text
        .parse()
        .map_err(|_| Error::Image(format!("{}: header value out of range", path.display())))?;
    Ok((value, pos))
}

fn read_header<'a>(bytes: &'a [u8], magic: &str, path: &Path) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(Error::Image(format!("{}: expected {} file", path.display(), magic)));
    }
    let (w, pos) = next_token(bytes, 2, path)?;
    let (h, pos) = next_token(bytes, pos, path)?;
    let (maxval, pos) = next_token(bytes, pos, path)?;
    if maxval != 255 {
        return Err(Error::Image(format!("{}: only maxval 255 is supported, got {}", path.display(), maxval)));
    }
    if w == 0 || h == 0 {
        return Err(Error::Image(format!("{}: zero image dimension", path.display())));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Image(format!("{}: missing raster separator", path.display())));
    }
    Ok((w, h, &bytes[pos + 1..]))
}

/// Reads a binary P6 file into a planar [3, h, w] buffer in [0, 1].
pub fn read_ppm(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let bytes = fs::read(path)?;
    let (w, h, raster) = read_header(&bytes, "P6", path)?;
    if raster.len() < 3 * w * h {
        return Err(Error::Image(format!(
            "{}: raster truncated, need {} bytes, have {}",
            path.display(),
            3 * w * h,
            raster.len()
        )));
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = raster[3 * i + c] as f32 / 255.0;
        }
    }
    Ok((data, h, w))
}

/// Reads a binary P5 file into an [h, w] buffer in [0, 1].
pub fn read_pgm(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let bytes = fs::read(path)?;
    let (w, h, raster) = read_header(&bytes, "P5", path)?;
    if raster.len() < w * h {
        return Err(Error::Image(format!(
            "{}: raster truncated, need {} bytes, have {}",
            path.display(),
            w * h,
            raster.len()
        )));
    }
    let data = raster[..w * h].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((data, h, w))
}
