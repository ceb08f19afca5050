//! Conversions between 8-bit RGB images and float tensors, and PNG helpers.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// `[3, H, W]` tensor with values in `[0, 1]`.
pub fn rgb_to_tensor<T: Real>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let plane = h * w;
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        T::lit(raw[p * 3 + c] as f64 / 255.0)
    })
}

/// Quantizes item `item` of a `[B, 3, H, W]` (or `[3, H, W]`) tensor to 8 bits.
pub fn tensor_to_rgb<T: Real>(t: &Tensor<T>, item: usize) -> Result<RgbImage> {
    let (b, c, h, w) = match *t.shape() {
        [c, h, w] => (1, c, h, w),
        [b, c, h, w] => (b, c, h, w),
        ref s => return shape_err(format!("expected an image tensor, got {s:?}")),
    };
    if c != 3 || item >= b {
        return shape_err(format!("tensor {:?} has no RGB item {item}", t.shape()));
    }
    let plane = h * w;
    let v = &t.values()[item * 3 * plane..(item + 1) * 3 * plane];
    let mut raw = vec![0u8; plane * 3];
    for p in 0..plane {
        for ch in 0..3 {
            raw[p * 3 + ch] = quantize(v[ch * plane + p].as_f64());
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to extents"))
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn save_rgb(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    Ok(img.save(path)?)
}

pub fn save_gray(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    Ok(img.save(path)?)
}

/// Places images side by side in rows; all tiles must share one size.
pub fn tile(rows: &[Vec<RgbImage>]) -> Result<RgbImage> {
    let first = rows.first().and_then(|r| r.first());
    let Some(first) = first else {
        return shape_err("nothing to tile");
    };
    let (tw, th) = first.dimensions();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let mut out = RgbImage::new(tw * cols, th * rows.len() as u32);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if img.dimensions() != (tw, th) {
                return shape_err("tiles differ in size");
            }
            image::imageops::replace(
                &mut out,
                img,
                (c as u32 * tw) as i64,
                (r as u32 * th) as i64,
            );
        }
    }
    Ok(out)
}
