//! PNG and raw-float image files. Every writer goes through a temporary
//! name and a rename so a crashed run never leaves a truncated artifact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ColorType, ImageFormat};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn temp_name(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = temp_name(path);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_png(path: &Path, buf: &[u8], width: usize, height: usize, color: ColorType) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = temp_name(path);
    image::save_buffer_with_format(&tmp, buf, width as u32, height as u32, color, ImageFormat::Png)
        .map_err(|e| Error::format(&tmp, e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// 8-bit grayscale PNG of row-major values in `[0, 1]`.
pub fn save_gray_png(path: &Path, values: &[f32], width: usize, height: usize) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::shape("save_gray_png", format!("{} values for {width}x{height}", values.len())));
    }
    let buf: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    save_png(path, &buf, width, height, ColorType::L8)
}

/// Saves a `[1, H, W]` or `[3, H, W]` tensor with values in `[0, 1]` as PNG.
pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    match t.shape() {
        [1, h, w] => save_gray_png(path, t.data(), *w, *h),
        [3, h, w] => {
            let plane = h * w;
            let buf: Vec<u8> = (0..plane)
                .flat_map(|i| (0..3).map(move |c| c * plane + i))
                .map(|i| quantize(t.data()[i]))
                .collect();
            save_png(path, &buf, *w, *h, ColorType::Rgb8)
        }
        s => Err(Error::shape("save_image", format!("expected [1|3, H, W], got {s:?}"))),
    }
}

/// Loads an 8-bit grayscale or RGB PNG as a `[C, H, W]` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        image::DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        image::DynamicImage::ImageRgb8(c) => (3, c.into_raw()),
        other => {
            return Err(Error::format(
                path,
                format!("unsupported pixel layout {:?}; expected 8-bit gray or RGB", other.color()),
            ))
        }
    };
    let plane = w * h;
    let mut data = vec![0.0f32; channels * plane];
    for (i, px) in raw.chunks(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * plane + i] = v as f32 / 255.0;
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

/// Little-endian `f32` values in row-major order, no header.
pub fn save_raw(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(path, &bytes)
}

pub fn load_raw(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::format(path, format!("expected {} bytes for {shape:?}, found {}", 4 * n, bytes.len())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape.to_vec(), data)
}
