//! Differentiable bilinear warping.
//!
//! Output pixel `(x, y)` reads the input at `(x + D(x,y,0), y + D(x,y,1))`:
//! the flow stores where to read from, not where pixels move to. Source
//! coordinates are clamped to `[0, W-1] x [0, H-1]` before interpolation;
//! the flow itself is never clamped.

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Per-pixel two-channel displacement map in pixel units. Channel 0 is
/// horizontal, channel 1 vertical.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T = f32> {
    data: Tensor<T>,
}

impl<T: Real> FlowField<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        let (_, c, _, _) = data.dims4()?;
        if c != 2 {
            return shape_err(format!("flow field needs exactly 2 channels, got {c}"));
        }
        Ok(Self { data })
    }

    pub fn zeros(batch: usize, height: usize, width: usize) -> Self {
        Self {
            data: Tensor::zeros([batch, 2, height, width]),
        }
    }

    pub fn constant(batch: usize, height: usize, width: usize, dx: T, dy: T) -> Self {
        let plane = height * width;
        let data = Tensor::from_fn([batch, 2, height, width], |i| {
            if (i / plane).is_multiple_of(2) {
                dx
            } else {
                dy
            }
        });
        Self { data }
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    /// Mirror image of the field for a horizontally flipped input: the
    /// planes are flipped left-right and the horizontal component negated.
    pub fn mirrored(&self) -> Self {
        let (b, _, h, w) = self.data.dims4().expect("flow is 4-D");
        let src = self.data.values();
        let mut out = vec![T::zero(); src.len()];
        for n in 0..b {
            for c in 0..2 {
                let base = (n * 2 + c) * h * w;
                for y in 0..h {
                    for x in 0..w {
                        let v = src[base + y * w + (w - 1 - x)];
                        out[base + y * w + x] = if c == 0 { -v } else { v };
                    }
                }
            }
        }
        Self {
            data: Tensor::new(self.data.shape().to_vec(), out).expect("same shape"),
        }
    }
}

#[derive(Clone, Copy)]
struct Sample<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    /// Whether the horizontal/vertical coordinate hit the border clamp.
    clamp_x: bool,
    clamp_y: bool,
}

#[inline]
fn locate<T: Real>(coord: T, n: usize) -> (usize, usize, T, bool) {
    let max = T::lit((n - 1) as f64);
    let clamped = coord < T::zero() || coord > max || coord.is_nan();
    let c = if coord.is_nan() {
        T::zero()
    } else {
        coord.max(T::zero()).min(max)
    };
    let lo = c.floor().to_usize().unwrap_or(0).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    (lo, hi, c - T::lit(lo as f64), clamped)
}

#[inline]
fn sample_point<T: Real>(x: usize, y: usize, dx: T, dy: T, h: usize, w: usize) -> Sample<T> {
    let (x0, x1, fx, clamp_x) = locate(T::lit(x as f64) + dx, w);
    let (y0, y1, fy, clamp_y) = locate(T::lit(y as f64) + dy, h);
    Sample {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        clamp_x,
        clamp_y,
    }
}

#[inline]
fn lerp<T: Real>(a: T, b: T, t: T) -> T {
    if t == T::zero() {
        a
    } else {
        a * (T::one() - t) + b * t
    }
}

fn check_shapes<T: Real>(
    image: &Tensor<T>,
    flow: &FlowField<T>,
) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = image.dims4()?;
    let (fb, _, fh, fw) = flow.data.dims4()?;
    if (b, h, w) != (fb, fh, fw) {
        return shape_err(format!(
            "image {:?} and flow {:?} disagree on batch or spatial extents",
            image.shape(),
            flow.data.shape()
        ));
    }
    if h == 0 || w == 0 {
        return shape_err("warp of an empty image");
    }
    Ok((b, c, h, w))
}

/// Bilinearly resamples `image` at the positions named by `flow`.
pub fn warp<T: Real>(image: &Tensor<T>, flow: &FlowField<T>) -> Result<Tensor<T>> {
    let (_, c, h, w) = check_shapes(image, flow)?;
    let plane = h * w;
    let img = image.values();
    let fl = flow.data.values();
    let mut out = vec![T::zero(); img.len()];
    out.par_chunks_mut(c * plane)
        .enumerate()
        .for_each(|(n, out_n)| {
            let img_n = &img[n * c * plane..(n + 1) * c * plane];
            let fl_n = &fl[n * 2 * plane..(n + 1) * 2 * plane];
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let s = sample_point(x, y, fl_n[p], fl_n[plane + p], h, w);
                    for ch in 0..c {
                        let src = &img_n[ch * plane..(ch + 1) * plane];
                        let top = lerp(src[s.y0 * w + s.x0], src[s.y0 * w + s.x1], s.fx);
                        let bot = lerp(src[s.y1 * w + s.x0], src[s.y1 * w + s.x1], s.fx);
                        out_n[ch * plane + p] = lerp(top, bot, s.fy);
                    }
                }
            }
        });
    Tensor::new(image.shape().to_vec(), out)
}

/// Gradients of [`warp`] with respect to the image and the flow, given the
/// upstream gradient of the output.
///
/// Image gradients scatter to the four source neighbours by their bilinear
/// weights; flow gradients are the interpolation-weight derivatives
/// contracted with the upstream gradient over channels, and vanish along
/// an axis whose coordinate was clamped.
pub fn warp_backward<T: Real>(
    image: &Tensor<T>,
    flow: &FlowField<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, FlowField<T>)> {
    let (_, c, h, w) = check_shapes(image, flow)?;
    if upstream.shape() != image.shape() {
        return shape_err(format!(
            "upstream {:?} vs image {:?}",
            upstream.shape(),
            image.shape()
        ));
    }
    let plane = h * w;
    let img = image.values();
    let fl = flow.data.values();
    let up = upstream.values();
    let mut g_img = vec![T::zero(); img.len()];
    let mut g_flow = vec![T::zero(); fl.len()];
    g_img
        .par_chunks_mut(c * plane)
        .zip(g_flow.par_chunks_mut(2 * plane))
        .enumerate()
        .for_each(|(n, (gi, gf))| {
            let img_n = &img[n * c * plane..(n + 1) * c * plane];
            let fl_n = &fl[n * 2 * plane..(n + 1) * 2 * plane];
            let up_n = &up[n * c * plane..(n + 1) * c * plane];
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let s = sample_point(x, y, fl_n[p], fl_n[plane + p], h, w);
                    let (ofx, ofy) = (T::one() - s.fx, T::one() - s.fy);
                    let mut dx = T::zero();
                    let mut dy = T::zero();
                    for ch in 0..c {
                        let g = up_n[ch * plane + p];
                        let src = &img_n[ch * plane..(ch + 1) * plane];
                        let dst = &mut gi[ch * plane..(ch + 1) * plane];
                        dst[s.y0 * w + s.x0] += g * ofx * ofy;
                        dst[s.y0 * w + s.x1] += g * s.fx * ofy;
                        dst[s.y1 * w + s.x0] += g * ofx * s.fy;
                        dst[s.y1 * w + s.x1] += g * s.fx * s.fy;
                        let (i00, i01) = (src[s.y0 * w + s.x0], src[s.y0 * w + s.x1]);
                        let (i10, i11) = (src[s.y1 * w + s.x0], src[s.y1 * w + s.x1]);
                        dx += g * (ofy * (i01 - i00) + s.fy * (i11 - i10));
                        dy += g * (ofx * (i10 - i00) + s.fx * (i11 - i01));
                    }
                    gf[p] = if s.clamp_x { T::zero() } else { dx };
                    gf[plane + p] = if s.clamp_y { T::zero() } else { dy };
                }
            }
        });
    Ok((
        Tensor::new(image.shape().to_vec(), g_img)?,
        FlowField::new(Tensor::new(flow.data.shape().to_vec(), g_flow)?)?,
    ))
}
