//! Lightness correction: a per-pixel mask in `[0, 1]` blends the warped
//! image towards white, restoring specular highlights and sclera that a
//! pure warp cannot create.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `image * (1 - mask) + mask`, with one mask channel shared by all colors.
pub fn apply_lightness<T: Real>(tape: &mut Tape<T>, image: Var, mask: Var) -> Result<Var> {
    tape.lightness_blend(image, mask)
}

/// Tape-free version of [`apply_lightness`] for a `[B, C, H, W]` image and
/// a `[B, 1, H, W]` mask.
pub fn blend<T: Real>(image: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let i = tape.leaf(image.clone());
    let m = tape.leaf(mask.clone());
    let out = apply_lightness(&mut tape, i, m)?;
    Ok(tape.value(out).clone())
}

/// Mean mask value per batch item.
pub fn mean_mask<T: Real>(mask: &Tensor<T>) -> Result<Vec<T>> {
    let (b, c, h, w) = mask.dims4()?;
    if c != 1 {
        return shape_err(format!("mask must have one channel, got {c}"));
    }
    let plane = h * w;
    Ok(mask
        .values()
        .chunks(plane)
        .take(b)
        .map(|p| p.iter().copied().sum::<T>() / T::lit(plane as f64))
        .collect())
}

/// Renders a `[1, H, W]` mask slice as 8-bit grayscale rows.
pub fn mask_to_gray<T: Real>(mask: &Tensor<T>, item: usize) -> Result<(usize, usize, Vec<u8>)> {
    let (b, c, h, w) = mask.dims4()?;
    if c != 1 || item >= b {
        return shape_err(format!("mask {:?} has no item {item}", mask.shape()));
    }
    let plane = &mask.values()[item * h * w..(item + 1) * h * w];
    let px = plane
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok((h, w, px))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_mask_keeps_image_and_one_mask_whitens() {
        let img = Tensor::<f64>::from_fn([1, 3, 2, 2], |i| i as f64 / 12.0);
        assert_eq!(blend(&img, &Tensor::zeros([1, 1, 2, 2])).unwrap(), img);
        let white = blend(&img, &Tensor::full([1, 1, 2, 2], 1.0)).unwrap();
        assert!(white.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn blend_is_monotone_in_mask() {
        let img = Tensor::<f64>::full([1, 3, 1, 1], 0.3);
        let lo = blend(&img, &Tensor::full([1, 1, 1, 1], 0.2)).unwrap();
        let hi = blend(&img, &Tensor::full([1, 1, 1, 1], 0.6)).unwrap();
        assert!(hi.values()[0] > lo.values()[0]);
        assert!((lo.values()[0] - (0.3 * 0.8 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn mask_with_wrong_shape_is_rejected() {
        let img = Tensor::<f32>::zeros([1, 3, 2, 2]);
        assert!(blend(&img, &Tensor::zeros([1, 3, 2, 2])).is_err());
        assert!(blend(&img, &Tensor::zeros([1, 1, 2, 3])).is_err());
    }

    #[test]
    fn gray_rendering() {
        let m = Tensor::<f32>::new([1, 1, 1, 3], vec![0.0, 0.5, 1.2]).unwrap();
        assert_eq!(mask_to_gray(&m, 0).unwrap().2, vec![0, 128, 255]);
        assert_eq!(mean_mask(&m).unwrap()[0], 1.7 / 3.0);
    }
}
