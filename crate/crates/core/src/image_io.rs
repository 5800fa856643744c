//! 8-bit image files. Dataset frames are stored linear; exported renders
//! are sRGB-encoded.

use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, ImageEncoder, Luma, Rgb};

use crate::error::{check_len, Error, Result};

/// Transfer function applied to linear values when writing 8-bit files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Linear,
    Srgb,
}

pub fn linear_to_srgb(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(v: u8) -> f64 {
    v as f64 / 255.0
}

/// Interleaved RGB in `[0, 1]` to 8-bit, with the chosen transfer.
pub fn to_rgb8(rgb: &[f64], encoding: Encoding) -> Vec<u8> {
    rgb.iter()
        .map(|&v| match encoding {
            Encoding::Linear => quantize(v),
            Encoding::Srgb => quantize(linear_to_srgb(v)),
        })
        .collect()
}

fn image_error(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode_png_rgb8(width: usize, height: usize, rgb8: &[u8]) -> Result<Vec<u8>> {
    check_len("rgb8 bytes", width * height * 3, rgb8.len())?;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(rgb8, width as u32, height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Data(format!("png encoding failed: {e}")))?;
    Ok(out)
}

pub fn encode_jpeg_rgb8(width: usize, height: usize, rgb8: &[u8], quality: u8) -> Result<Vec<u8>> {
    check_len("rgb8 bytes", width * height * 3, rgb8.len())?;
    let mut out = Vec::new();
    let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality);
    enc.encode(rgb8, width as u32, height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Data(format!("jpeg encoding failed: {e}")))?;
    Ok(out)
}

pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[f64], encoding: Encoding) -> Result<()> {
    let bytes = encode_png_rgb8(width, height, &to_rgb8(rgb, encoding))?;
    write_atomic(path, &bytes)
}

pub fn write_mask_png(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    check_len("mask pixels", width * height, mask.len())?;
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, mask.iter().map(|&m| if m { 255 } else { 0 }).collect())
            .ok_or_else(|| Error::Data("mask buffer size mismatch".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).map_err(|e| image_error(path, e))?;
    write_atomic(path, out.get_ref())
}

/// Binary PPM (P6).
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[f64], encoding: Encoding) -> Result<()> {
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend(to_rgb8(rgb, encoding));
    write_atomic(path, &bytes)
}

/// Reads an 8-bit RGB image as `(width, height, bytes)`.
pub fn read_rgb8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let rgb: ImageBuffer<Rgb<u8>, Vec<u8>> = img.to_rgb8();
    Ok((rgb.width() as usize, rgb.height() as usize, rgb.into_raw()))
}

pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let l = img.to_luma8();
    Ok((l.width() as usize, l.height() as usize, l.into_raw().into_iter().map(|v| v >= 128).collect()))
}
