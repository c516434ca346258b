//! 8-bit PNG and binary PPM images.

use std::fs;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Result, WsrError};
use crate::render::Image;

fn format_for(path: &Path) -> Result<ImageFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("ppm") => Ok(ImageFormat::Pnm),
        other => Err(WsrError::Unsupported(format!(
            "image extension {:?} (expected .png or .ppm)",
            other.unwrap_or("")
        ))),
    }
}

/// `v / 255` per channel.
pub fn decode_image(bytes: &[u8], format: ImageFormat) -> Result<Image> {
    let img = image::load_from_memory_with_format(bytes, format)?.to_rgb8();
    let pixels = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Image::from_pixels(img.width(), img.height(), pixels)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let format = format_for(path)?;
    let bytes = fs::read(path).map_err(|e| WsrError::io(path, e))?;
    decode_image(&bytes, format)
}

/// Clamps to `[0, 1]` and rounds half away from zero.
pub fn quantize(v: f64) -> u8 {
    (crate::render::clamp01(v) * 255.0).round() as u8
}

pub fn to_rgb8(img: &Image) -> RgbImage {
    let raw = img.pixels.iter().map(|&v| quantize(v)).collect();
    RgbImage::from_raw(img.width, img.height, raw).expect("pixel buffer matches dimensions")
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let format = format_for(path)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| WsrError::io(dir, e))?;
    }
    to_rgb8(img).save_with_format(path, format)?;
    Ok(())
}
