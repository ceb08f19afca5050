//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use warpnet::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Direct four-neighbor bilinear read of plane `p` (row-major `h x w`) at
/// `(x, y)`, coordinates clamped to the image.
pub fn bilinear_at(p: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (x - x0 as f64, y - y0 as f64);
    let at = |yy: usize, xx: usize| p[yy * w + xx];
    (1.0 - ay) * ((1.0 - ax) * at(y0, x0) + ax * at(y0, x1))
        + ay * ((1.0 - ax) * at(y1, x0) + ax * at(y1, x1))
}

/// Backward warp: output pixel `(x, y)` reads the input at `(x + dx, y + dy)`.
pub fn warp_oracle(image: &Tensor<f64>, flow: &Tensor<f64>) -> Vec<f64> {
    let s = image.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let (img, fl) = (image.values(), flow.values());
    let mut out = vec![0.0; img.len()];
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let dx = fl[(n * 2) * plane + y * w + x];
                let dy = fl[(n * 2 + 1) * plane + y * w + x];
                for ch in 0..c {
                    let p = &img[(n * c + ch) * plane..][..plane];
                    out[(n * c + ch) * plane + y * w + x] =
                        bilinear_at(p, h, w, x as f64 + dx, y as f64 + dy);
                }
            }
        }
    }
    out
}

/// Zero-padded "same" cross-correlation, weights `[co, ci, kh, kw]`.
pub fn conv_oracle(x: &Tensor<f64>, wt: &Tensor<f64>, bias: &[f64]) -> Vec<f64> {
    let (b, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (wt.shape()[0], wt.shape()[2], wt.shape()[3]);
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let mut out = vec![0.0; b * co * h * w];
    for n in 0..b {
        for o in 0..co {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = bias[o];
                    for i in 0..ci {
                        for u in 0..kh as isize {
                            for v in 0..kw as isize {
                                let (sy, sx) = (y + u - ph, xx + v - pw);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let xv =
                                    x.values()[((n * ci + i) * h + sy as usize) * w + sx as usize];
                                let wv =
                                    wt.values()[((o * ci + i) * kh + u as usize) * kw + v as usize];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * co + o) * h + y as usize) * w + xx as usize] = acc;
                }
            }
        }
    }
    out
}

pub fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    c
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
