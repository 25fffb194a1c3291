//! PNG disparity maps (16-bit, value/256, zero = invalid) and 8-bit images.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, ImageReader, Luma, Rgb};

use crate::error::{Error, Result};
use crate::stereo::DisparityMap;
use crate::tensor::Tensor;

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(image_err(path))
}

/// Stored value for a valid disparity: nearest 1/256 step, kept inside
/// `1..=65535` so that a valid pixel never reads back as invalid.
pub fn quantize_disparity(d: f64) -> u16 {
    (d * 256.0).round().clamp(1.0, 65535.0) as u16
}

pub fn read_kitti_disparity(path: &Path) -> Result<DisparityMap> {
    let img = match open(path)? {
        DynamicImage::ImageLuma16(img) => img,
        other => {
            return Err(Error::format(
                "bit depth",
                format!("expected 16-bit single-channel PNG, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    let mask: Vec<bool> = raw.iter().map(|&v| v != 0).collect();
    let values = raw.iter().map(|&v| v as f64 / 256.0).collect();
    DisparityMap::new(Tensor::new([1, 1, h as usize, w as usize], values)?, 0)?.with_mask(mask)
}

/// Writes the first batch item; invalid pixels are stored as 0.
pub fn write_kitti_disparity(path: &Path, map: &DisparityMap) -> Result<()> {
    let [_, _, h, w] = map.shape();
    let d = map.data.data();
    let raw: Vec<u16> = (0..h * w)
        .map(|i| if map.is_valid(i) { quantize_disparity(d[i]) } else { 0 })
        .collect();
    ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, raw)
        .expect("buffer sized from map")
        .save_with_format(path, ImageFormat::Png)
        .map_err(image_err(path))
}

/// Reads any 8-bit image as a `1×3×H×W` tensor in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        raw[(y * w + x) * 3 + c] as f64 / 255.0
    }))
}

/// Writes the first batch item of a 3-channel tensor as 8-bit RGB, rounding
/// to the nearest level after clamping to `[0, 1]`.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let [_, c, h, w] = image.shape();
    if c != 3 {
        return Err(Error::dim(format!("images have 3 channels, got {c}")));
    }
    let mut raw = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                raw[(y * w + x) * 3 + ch] = (image.at(0, ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, raw)
        .expect("buffer sized from image")
        .save_with_format(path, ImageFormat::Png)
        .map_err(image_err(path))
}
