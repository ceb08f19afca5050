//! Slice-level forward and backward kernels behind the tape operations.
//!
//! Every kernel parallelizes over batch items only and reduces
//! per-item partial gradients in batch order, so results do not depend on
//! the number of worker threads.

use std::sync::{Mutex, MutexGuard};

use rayon::prelude::*;

use crate::real::{MatRef, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl ConvGeom {
    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

/// Unrolls one `C x H x W` image into a `(C*kh*kw) x (H*W)` matrix with zero padding.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (h, w) = (g.height, g.width);
    let (ph, pw) = ((g.kernel_h - 1) / 2, (g.kernel_w - 1) / 2);
    let plane = g.plane();
    for c in 0..g.in_channels {
        let src = &x[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let dx = kx as isize - pw as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - ph as isize;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(T::zero());
                    out[x_hi..].fill(T::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&srow[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im<T: Real>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let (h, w) = (g.height, g.width);
    let (ph, pw) = ((g.kernel_h - 1) / 2, (g.kernel_w - 1) / 2);
    let plane = g.plane();
    for c in 0..g.in_channels {
        let dst = &mut x[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let dx = kx as isize - pw as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x_lo as isize + dx) as usize;
                    let drow = &mut dst[sy as usize * w + s0..sy as usize * w + s0 + (x_hi - x_lo)];
                    for (d, &s) in drow.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Per-thread scratch buffers, allocated once per kernel call rather than
/// once per batch item.
struct ScratchPool<T> {
    slots: Vec<Mutex<Vec<Vec<T>>>>,
}

impl<T: Real> ScratchPool<T> {
    fn new(len: usize, buffers: usize) -> Self {
        let slots = (0..rayon::current_num_threads())
            .map(|_| Mutex::new(vec![vec![T::zero(); len]; buffers]))
            .collect();
        Self { slots }
    }

    fn get(&self) -> MutexGuard<'_, Vec<Vec<T>>> {
        let i = rayon::current_thread_index().unwrap_or(0) % self.slots.len();
        self.slots[i].lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.plane();
    let patch = g.patch();
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];
    let pool = ScratchPool::new(patch * plane, 1);
    out.par_chunks_mut(g.out_channels * plane)
        .zip(x.par_chunks(g.in_channels * plane))
        .for_each(|(out_n, x_n)| {
            let mut guard = pool.get();
            let col = &mut guard[0];
            im2col(x_n, g, col);
            T::gemm(
                g.out_channels,
                patch,
                plane,
                MatRef::row_major(weight, patch),
                MatRef::row_major(col, plane),
                T::zero(),
                out_n,
            );
            for (co, row) in out_n.chunks_mut(plane).enumerate() {
                let b = bias[co];
                row.iter_mut().for_each(|v| *v += b);
            }
        });
    out
}

pub struct ConvGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(x: &[T], weight: &[T], dout: &[T], g: &ConvGeom) -> ConvGrads<T> {
    let plane = g.plane();
    let patch = g.patch();
    let mut dx = vec![T::zero(); g.batch * g.in_channels * plane];
    let pool = ScratchPool::new(patch * plane, 2);
    let partials: Vec<(Vec<T>, Vec<T>)> = dx
        .par_chunks_mut(g.in_channels * plane)
        .zip(x.par_chunks(g.in_channels * plane))
        .zip(dout.par_chunks(g.out_channels * plane))
        .map(|((dx_n, x_n), dout_n)| {
            let mut guard = pool.get();
            let [col, dcol] = &mut guard[..] else {
                unreachable!("two buffers per slot")
            };
            im2col(x_n, g, col);
            let mut dw = vec![T::zero(); g.out_channels * patch];
            T::gemm(
                g.out_channels,
                plane,
                patch,
                MatRef::row_major(dout_n, plane),
                MatRef::transposed(col, plane),
                T::zero(),
                &mut dw,
            );
            T::gemm(
                patch,
                g.out_channels,
                plane,
                MatRef::transposed(weight, patch),
                MatRef::row_major(dout_n, plane),
                T::zero(),
                dcol,
            );
            col2im(dcol, g, dx_n);
            let db = dout_n
                .chunks(plane)
                .map(|r| r.iter().copied().sum())
                .collect();
            (dw, db)
        })
        .collect();
    let mut dweight = vec![T::zero(); g.out_channels * patch];
    let mut dbias = vec![T::zero(); g.out_channels];
    for (dw, db) in &partials {
        add_into(&mut dweight, dw);
        add_into(&mut dbias, db);
    }
    ConvGrads {
        input: dx,
        weight: dweight,
        bias: dbias,
    }
}

pub(crate) fn add_into<T: Real>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// `(batch, channels, plane)` view used by the per-channel kernels.
#[derive(Clone, Copy, Debug)]
pub struct ChannelLayout {
    pub batch: usize,
    pub channels: usize,
    pub plane: usize,
}

impl ChannelLayout {
    fn per_channel(&self) -> usize {
        self.batch * self.plane
    }

    fn for_channel<T: Real>(&self, data: &[T], c: usize, mut f: impl FnMut(T)) {
        for n in 0..self.batch {
            let base = (n * self.channels + c) * self.plane;
            data[base..base + self.plane].iter().for_each(|&v| f(v));
        }
    }
}

pub struct BnTrainForward<T> {
    pub output: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance used for normalization.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn batchnorm_train_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    l: ChannelLayout,
) -> BnTrainForward<T> {
    let count = T::lit(l.per_channel() as f64);
    let mut mean = vec![T::zero(); l.channels];
    let mut var = vec![T::zero(); l.channels];
    for c in 0..l.channels {
        let mut s = T::zero();
        l.for_channel(x, c, |v| s += v);
        let m = s / count;
        let mut ss = T::zero();
        l.for_channel(x, c, |v| ss += (v - m) * (v - m));
        mean[c] = m;
        var[c] = ss / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut output = vec![T::zero(); x.len()];
    for n in 0..l.batch {
        for c in 0..l.channels {
            let base = (n * l.channels + c) * l.plane;
            let (m, s, gm, bt) = (mean[c], inv_std[c], gamma[c], beta[c]);
            for (o, &v) in output[base..base + l.plane]
                .iter_mut()
                .zip(&x[base..base + l.plane])
            {
                *o = gm * ((v - m) * s) + bt;
            }
        }
    }
    BnTrainForward {
        output,
        mean,
        var,
        inv_std,
    }
}

pub struct BnGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batchnorm_train_backward<T: Real>(
    x: &[T],
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
    dy: &[T],
    l: ChannelLayout,
) -> BnGrads<T> {
    let count = T::lit(l.per_channel() as f64);
    let mut dgamma = vec![T::zero(); l.channels];
    let mut dbeta = vec![T::zero(); l.channels];
    for n in 0..l.batch {
        for c in 0..l.channels {
            let base = (n * l.channels + c) * l.plane;
            for i in base..base + l.plane {
                let xhat = (x[i] - mean[c]) * inv_std[c];
                dgamma[c] += dy[i] * xhat;
                dbeta[c] += dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); x.len()];
    for n in 0..l.batch {
        for c in 0..l.channels {
            let base = (n * l.channels + c) * l.plane;
            let k = gamma[c] * inv_std[c] / count;
            for i in base..base + l.plane {
                let xhat = (x[i] - mean[c]) * inv_std[c];
                dx[i] = k * (count * dy[i] - dbeta[c] - xhat * dgamma[c]);
            }
        }
    }
    BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

/// Inference-mode normalization: an affine map per channel.
pub fn batchnorm_infer_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
    l: ChannelLayout,
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for n in 0..l.batch {
        for c in 0..l.channels {
            let base = (n * l.channels + c) * l.plane;
            let s = T::one() / (var[c] + eps).sqrt();
            for i in base..base + l.plane {
                out[i] = gamma[c] * ((x[i] - mean[c]) * s) + beta[c];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_infer_backward<T: Real>(
    x: &[T],
    gamma: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
    dy: &[T],
    l: ChannelLayout,
) -> BnGrads<T> {
    let mut dgamma = vec![T::zero(); l.channels];
    let mut dbeta = vec![T::zero(); l.channels];
    let mut dx = vec![T::zero(); x.len()];
    for n in 0..l.batch {
        for c in 0..l.channels {
            let base = (n * l.channels + c) * l.plane;
            let s = T::one() / (var[c] + eps).sqrt();
            for i in base..base + l.plane {
                dgamma[c] += dy[i] * (x[i] - mean[c]) * s;
                dbeta[c] += dy[i];
                dx[i] = dy[i] * gamma[c] * s;
            }
        }
    }
    BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

/// Source index pair and blend fraction for one output sample of a 2x
/// bilinear upsampling along an axis of length `n`.
#[derive(Clone, Copy, Debug)]
pub struct Tap<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
}

/// Half-pixel-center taps: output `i` reads input coordinate `(i + 0.5) / 2 - 0.5`, clamped.
pub fn upsample_taps<T: Real>(n: usize) -> Vec<Tap<T>> {
    let max = T::lit((n - 1) as f64);
    (0..2 * n)
        .map(|i| {
            let src = (T::lit(i as f64 + 0.5) / T::lit(2.0) - T::lit(0.5))
                .max(T::zero())
                .min(max);
            let lo = src.floor().to_usize().unwrap_or(0).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            Tap {
                lo,
                hi,
                frac: src - T::lit(lo as f64),
            }
        })
        .collect()
}

pub fn upsample2x_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ty = upsample_taps::<T>(h);
    let tx = upsample_taps::<T>(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let top =
                    src[a.lo * w + b.lo] * (T::one() - b.frac) + src[a.lo * w + b.hi] * b.frac;
                let bot =
                    src[a.hi * w + b.lo] * (T::one() - b.frac) + src[a.hi * w + b.hi] * b.frac;
                dst[oy * ow + ox] = top * (T::one() - a.frac) + bot * a.frac;
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Real>(dout: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ty = upsample_taps::<T>(h);
    let tx = upsample_taps::<T>(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                let gt = g * (T::one() - a.frac);
                let gb = g * a.frac;
                dst[a.lo * w + b.lo] += gt * (T::one() - b.frac);
                dst[a.lo * w + b.hi] += gt * b.frac;
                dst[a.hi * w + b.lo] += gb * (T::one() - b.frac);
                dst[a.hi * w + b.hi] += gb * b.frac;
            }
        }
    }
    dx
}

/// Crops or edge-replicates every plane from `h x w` to `oh x ow`.
pub fn resize_edge_forward<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            let sy = y.min(h - 1);
            for xx in 0..ow {
                out[(p * oh + y) * ow + xx] = x[(p * h + sy) * w + xx.min(w - 1)];
            }
        }
    }
    out
}

pub fn resize_edge_backward<T: Real>(
    dout: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            let sy = y.min(h - 1);
            for xx in 0..ow {
                dx[(p * h + sy) * w + xx.min(w - 1)] += dout[(p * oh + y) * ow + xx];
            }
        }
    }
    dx
}

/// `x[rows, inner] . w[inner, outer] + b`.
pub fn fc_forward<T: Real>(
    x: &[T],
    w: &[T],
    b: &[T],
    rows: usize,
    inner: usize,
    outer: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * outer);
    for _ in 0..rows {
        out.extend_from_slice(b);
    }
    T::gemm(
        rows,
        inner,
        outer,
        MatRef::row_major(x, inner),
        MatRef::row_major(w, outer),
        T::one(),
        &mut out,
    );
    out
}

pub fn fc_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    rows: usize,
    inner: usize,
    outer: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); rows * inner];
    T::gemm(
        rows,
        outer,
        inner,
        MatRef::row_major(dout, outer),
        MatRef::transposed(w, outer),
        T::zero(),
        &mut dx,
    );
    let mut dw = vec![T::zero(); inner * outer];
    T::gemm(
        inner,
        rows,
        outer,
        MatRef::transposed(x, inner),
        MatRef::row_major(dout, outer),
        T::zero(),
        &mut dw,
    );
    let mut db = vec![T::zero(); outer];
    for r in 0..rows {
        add_into(&mut db, &dout[r * outer..(r + 1) * outer]);
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_taps_follow_half_pixel_centers() {
        let t = upsample_taps::<f64>(3);
        // output 0 -> -0.25 clamped to 0; output 1 -> 0.25; output 5 -> 2.25 clamped to 2
        assert_eq!((t[0].lo, t[0].hi, t[0].frac), (0, 1, 0.0));
        assert_eq!((t[1].lo, t[1].hi), (0, 1));
        assert!((t[1].frac - 0.25).abs() < 1e-15);
        assert!((t[2].frac - 0.75).abs() < 1e-15);
        assert_eq!((t[5].lo, t[5].hi, t[5].frac), (2, 2, 0.0));
    }

    #[test]
    fn resize_edge_replicates_last_row_and_column() {
        let x = [1.0f32, 2.0, 3.0, 4.0];
        let out = resize_edge_forward(&x, 1, 2, 2, 3, 3);
        assert_eq!(out, vec![1.0, 2.0, 2.0, 3.0, 4.0, 4.0, 3.0, 4.0, 4.0]);
        let back = resize_edge_backward(&[1.0f32; 9], 1, 2, 2, 3, 3);
        assert_eq!(back, vec![1.0, 2.0, 2.0, 4.0]);
    }
}
