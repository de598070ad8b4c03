//! Image loading and saving for inference: decode to [0, 1] tensors,
//! resize to the network input size with the same bilinear kernel the
//! model uses, apply the training-time normalizations, and write saliency
//! maps back out as 8-bit grayscale PNG.

use std::path::Path;

use image::DynamicImage;

use crate::error::{Error, Result};
use crate::nn::bilinear_resize;
use crate::tensor::{Shape, Tensor};

/// Channel statistics applied to RGB inputs.
pub const RGB_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const RGB_STD: [f32; 3] = [0.229, 0.224, 0.225];

fn image_error(path: &Path, reason: impl ToString) -> Error {
    Error::Image {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| image_error(path, e))
}

/// Decodes an RGB image into a `(1, 3, size, size)` tensor with values in
/// [0, 1]. Other color layouts are converted to RGB first.
pub fn load_rgb_raw(path: &Path, size: usize) -> Result<Tensor> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let t = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        raw[(y * w + x) * 3 + c] as f32 / 255.0
    })?;
    bilinear_resize(&t, size, size)
}

/// Decodes a grayscale image into a `(1, 1, size, size)` tensor with
/// values in [0, 1]. 16-bit sources keep their full precision; everything
/// else goes through 8-bit luma.
pub fn load_gray_raw(path: &Path, size: usize) -> Result<Tensor> {
    let img = decode(path)?;
    let t = match img {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => {
            let gray = img.to_luma16();
            let (w, h) = (gray.width() as usize, gray.height() as usize);
            let raw = gray.as_raw();
            Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
                raw[y * w + x] as f32 / 65535.0
            })?
        }
        _ => {
            let gray = img.to_luma8();
            let (w, h) = (gray.width() as usize, gray.height() as usize);
            let raw = gray.as_raw();
            Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
                raw[y * w + x] as f32 / 255.0
            })?
        }
    };
    bilinear_resize(&t, size, size)
}

/// Standardizes a [0, 1] RGB tensor with the per-channel statistics.
pub fn normalize_rgb(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.c != 3 {
        return Err(Error::ChannelMismatch(format!(
            "rgb normalization expects 3 channels, got {}",
            s.c
        )));
    }
    Tensor::from_fn(s, |n, c, y, x| {
        (t.get(n, c, y, x) - RGB_MEAN[c]) / RGB_STD[c]
    })
}

/// Maps a [0, 1] depth tensor to [-1, 1], optionally flipping the
/// near/far convention first.
pub fn normalize_depth(t: &Tensor, invert: bool) -> Result<Tensor> {
    let s = t.shape();
    if s.c != 1 {
        return Err(Error::ChannelMismatch(format!(
            "depth normalization expects 1 channel, got {}",
            s.c
        )));
    }
    Tensor::from_fn(s, |n, c, y, x| {
        let v = t.get(n, c, y, x);
        let v = if invert { 1.0 - v } else { v };
        (v - 0.5) / 0.5
    })
}

/// Loads and normalizes an RGB image for the network.
pub fn load_rgb(path: &Path, size: usize) -> Result<Tensor> {
    normalize_rgb(&load_rgb_raw(path, size)?)
}

/// Loads and normalizes a depth map for the network.
pub fn load_depth(path: &Path, size: usize, invert: bool) -> Result<Tensor> {
    normalize_depth(&load_gray_raw(path, size)?, invert)
}

/// Writes a `(1, 1, h, w)` map with values in [0, 1] as an 8-bit
/// grayscale PNG, rounding half-to-even.
pub fn save_map(t: &Tensor, path: &Path) -> Result<()> {
    let s = t.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::ShapeMismatch(format!(
            "save_map expects (1, 1, h, w), got {s}"
        )));
    }
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8)
        .collect();
    image::save_buffer_with_format(
        path,
        &bytes,
        s.w as u32,
        s.h as u32,
        image::ExtendedColorType::L8,
        image::ImageFormat::Png,
    )
    .map_err(|e| image_error(path, e))
}
