//! Portable float map: `Pf` (one channel) or `PF` (three channels), a
//! dimensions line, a scale line whose sign gives the byte order (negative
//! means little-endian), then rows of 32-bit floats from bottom to top.

use std::path::Path;

use crate::error::{Error, Result};
use crate::stereo::DisparityMap;
use crate::tensor::Tensor;

/// Decoded float map; `data` is row-major from the top row, channels
/// interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Next whitespace-delimited token; returns it and the index just past it.
fn token(bytes: &[u8], mut pos: usize, field: &str) -> Result<(String, usize)> {
    while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    let start = pos;
    while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    if start == pos {
        return Err(Error::format(field, "header ends early"));
    }
    let tok = std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format(field, "not ASCII"))?;
    Ok((tok.to_string(), pos))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<PfmImage> {
    let (magic, pos) = token(bytes, 0, "magic")?;
    let channels = match magic.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::format("magic", format!("expected Pf or PF, found {other:?}"))),
    };
    let dim = |s: &str| -> Result<usize> {
        match s.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::format("dimensions", format!("bad dimension {s:?}"))),
        }
    };
    let (w, pos) = token(bytes, pos, "dimensions")?;
    let (h, pos) = token(bytes, pos, "dimensions")?;
    let (width, height) = (dim(&w)?, dim(&h)?);
    let (scale, pos) = token(bytes, pos, "scale")?;
    let scale: f64 = scale
        .parse()
        .map_err(|_| Error::format("scale", format!("not a number: {scale:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format("scale", "scale must be finite and non-zero"));
    }
    let little = scale < 0.0;
    // Exactly one whitespace byte separates the header from the payload.
    let start = pos + 1;
    let count = width * height * channels;
    let payload = bytes.get(start..).unwrap_or(&[]);
    if payload.len() < 4 * count {
        return Err(Error::format(
            "payload",
            format!("{} bytes for {count} values", payload.len()),
        ));
    }
    let mut data = vec![0f32; count];
    let row = width * channels;
    for (i, chunk) in payload[..4 * count].chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().unwrap();
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (file_row, col) = (i / row, i % row);
        data[(height - 1 - file_row) * row + col] = v;
    }
    Ok(PfmImage {
        width,
        height,
        channels,
        data,
    })
}

/// Little-endian encoding with scale −1.
pub fn encode_pfm(img: &PfmImage) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::usage(format!("PFM stores 1 or 3 channels, not {c}"))),
    };
    if img.data.len() != img.width * img.height * img.channels {
        return Err(Error::dim("PFM data length does not match its dimensions"));
    }
    let mut out = format!("{magic}\n{} {}\n-1\n", img.width, img.height).into_bytes();
    let row = img.width * img.channels;
    for y in (0..img.height).rev() {
        for v in &img.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_pfm(path: &Path) -> Result<PfmImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes)
}

pub fn write_pfm(path: &Path, img: &PfmImage) -> Result<()> {
    std::fs::write(path, encode_pfm(img)?).map_err(|e| Error::io(path, e))
}

/// Reads a one-channel map as a full-resolution disparity; non-finite values
/// mark invalid pixels and are replaced by zero.
pub fn read_disparity_pfm(path: &Path) -> Result<DisparityMap> {
    let img = read_pfm(path)?;
    if img.channels != 1 {
        return Err(Error::format("magic", "disparity maps must have one channel (Pf)"));
    }
    let mask: Vec<bool> = img.data.iter().map(|v| v.is_finite()).collect();
    let values = img
        .data
        .iter()
        .map(|&v| if v.is_finite() { v as f64 } else { 0.0 })
        .collect();
    let t = Tensor::new([1, 1, img.height, img.width], values)?;
    let map = DisparityMap::new(t, 0)?;
    if mask.iter().all(|&v| v) {
        Ok(map)
    } else {
        map.with_mask(mask)
    }
}

/// Writes the first batch item; invalid pixels are stored as +∞.
pub fn write_disparity_pfm(path: &Path, map: &DisparityMap) -> Result<()> {
    let [_, _, h, w] = map.shape();
    let d = map.data.data();
    let data = (0..h * w)
        .map(|i| if map.is_valid(i) { d[i] as f32 } else { f32::INFINITY })
        .collect();
    write_pfm(
        path,
        &PfmImage {
            width: w,
            height: h,
            channels: 1,
            data,
        },
    )
}
