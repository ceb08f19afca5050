//! Dynamic reverse-mode tape.
//!
//! Every forward operation appends a node holding its output value and
//! what it needs to propagate gradients. [`Tape::backward`] walks the
//! nodes once in reverse; a tape cannot be replayed, a new forward pass
//! records a new tape.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ChannelLayout, ConvGeom};
use crate::real::Real;
use crate::sampler::{self, FlowField};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Distance used inside the registration-tolerant loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    L1,
    L2,
}

/// Batch statistics observed by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the quantity folded into running statistics.
    pub var_unbiased: Vec<T>,
}

pub enum BnMode<'a, T> {
    Train,
    Infer {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    BnTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        layout: ChannelLayout,
    },
    BnInfer {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
        layout: ChannelLayout,
    },
    Fc {
        input: Var,
        weight: Var,
        bias: Var,
        rows: usize,
        inner: usize,
        outer: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Scale(Var, T),
    Add(Var, Var),
    Sum(Var),
    Upsample2x {
        input: Var,
        planes: usize,
        h: usize,
        w: usize,
    },
    ResizeEdge {
        input: Var,
        planes: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    },
    Broadcast {
        input: Var,
        plane: usize,
    },
    Concat {
        inputs: Vec<(Var, usize)>,
        batch: usize,
        plane: usize,
    },
    Warp {
        image: Var,
        flow: Var,
    },
    Blend {
        image: Var,
        mask: Var,
    },
    Mse {
        input: Var,
        target: Vec<T>,
    },
    Registration {
        input: Var,
        target_big: Tensor<T>,
        offsets: Vec<(usize, usize)>,
        k: usize,
        dist: Distance,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.backward_done {
            return Err(Error::Tape(
                "tape already consumed by backward; record a new forward pass".into(),
            ));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let mut value = value;
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass, `None` when `v` does not reach the loss.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn conv2d_same(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        let (co, ci, kh, kw) = self.value(weight).dims4()?;
        if ci != c {
            return shape_err(format!("conv input has {c} channels, weights expect {ci}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return shape_err(format!(
                "same-mode convolution needs odd kernel extents, got {kh}x{kw}"
            ));
        }
        if self.value(bias).shape() != [co] {
            return shape_err(format!(
                "conv bias shape {:?}, expected [{co}]",
                self.value(bias).shape()
            ));
        }
        let geom = ConvGeom {
            batch: b,
            in_channels: c,
            out_channels: co,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
        };
        let out = kernels::conv2d_forward(
            self.value(input).values(),
            self.value(weight).values(),
            self.value(bias).values(),
            &geom,
        );
        self.push(
            Tensor::new([b, co, h, w], out)?,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            },
        )
    }

    fn channel_layout(&self, input: Var) -> Result<ChannelLayout> {
        match *self.value(input).shape() {
            [b, c, h, w] => Ok(ChannelLayout {
                batch: b,
                channels: c,
                plane: h * w,
            }),
            [b, c] => Ok(ChannelLayout {
                batch: b,
                channels: c,
                plane: 1,
            }),
            ref s => shape_err(format!("batchnorm expects BCHW or BC input, got {s:?}")),
        }
    }

    /// Per-channel batch normalization with affine scale `gamma` and shift `beta`.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BnBatchStats<T>>)> {
        let layout = self.channel_layout(input)?;
        let c = layout.channels;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return shape_err(format!("batchnorm parameters must have {c} entries"));
        }
        let shape = self.value(input).shape().to_vec();
        match mode {
            BnMode::Train => {
                let f = kernels::batchnorm_train_forward(
                    self.value(input).values(),
                    self.value(gamma).values(),
                    self.value(beta).values(),
                    eps,
                    layout,
                );
                let n = layout.batch * layout.plane;
                let correction = if n > 1 {
                    T::lit(n as f64 / (n - 1) as f64)
                } else {
                    T::one()
                };
                let stats = BnBatchStats {
                    mean: f.mean.clone(),
                    var_unbiased: f.var.iter().map(|&v| v * correction).collect(),
                };
                let var = self.push(
                    Tensor::new(shape, f.output)?,
                    Op::BnTrain {
                        input,
                        gamma,
                        beta,
                        mean: f.mean,
                        inv_std: f.inv_std,
                        layout,
                    },
                )?;
                Ok((var, Some(stats)))
            }
            BnMode::Infer {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return shape_err(format!("running statistics must have {c} entries"));
                }
                let out = kernels::batchnorm_infer_forward(
                    self.value(input).values(),
                    self.value(gamma).values(),
                    self.value(beta).values(),
                    running_mean,
                    running_var,
                    eps,
                    layout,
                );
                let var = self.push(
                    Tensor::new(shape, out)?,
                    Op::BnInfer {
                        input,
                        gamma,
                        beta,
                        mean: running_mean.to_vec(),
                        var: running_var.to_vec(),
                        eps,
                        layout,
                    },
                )?;
                Ok((var, None))
            }
        }
    }

    /// `input[B, D] . weight[D, D'] + bias[D']`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (rows, inner) = self.value(input).dims2()?;
        let (wi, outer) = self.value(weight).dims2()?;
        if wi != inner {
            return shape_err(format!(
                "fully connected input width {inner} vs weight rows {wi}"
            ));
        }
        if self.value(bias).numel() != outer {
            return shape_err(format!("fully connected bias needs {outer} entries"));
        }
        let out = kernels::fc_forward(
            self.value(input).values(),
            self.value(weight).values(),
            self.value(bias).values(),
            rows,
            inner,
            outer,
        );
        self.push(
            Tensor::new([rows, outer], out)?,
            Op::Fc {
                input,
                weight,
                bias,
                rows,
                inner,
                outer,
            },
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self
            .value(input)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = self
            .value(input)
            .map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(input))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let out = self.value(input).map(|v| v * factor);
        self.push(out, Op::Scale(input, factor))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(format!("add of {:?} and {:?}", ta.shape(), tb.shape()));
        }
        let values = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), values)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).values().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(input))
    }

    /// Bilinear 2x spatial upsampling with half-pixel centers and edge clamping.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        let out = kernels::upsample2x_forward(self.value(input).values(), b * c, h, w);
        self.push(
            Tensor::new([b, c, 2 * h, 2 * w], out)?,
            Op::Upsample2x {
                input,
                planes: b * c,
                h,
                w,
            },
        )
    }

    /// Crops, or pads by replicating the last row/column, to `height x width`.
    pub fn resize_edge(&mut self, input: Var, height: usize, width: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if (h, w) == (height, width) {
            return Ok(input);
        }
        let out =
            kernels::resize_edge_forward(self.value(input).values(), b * c, h, w, height, width);
        self.push(
            Tensor::new([b, c, height, width], out)?,
            Op::ResizeEdge {
                input,
                planes: b * c,
                h,
                w,
                oh: height,
                ow: width,
            },
        )
    }

    /// Replicates a `[B, D]` matrix into `D` constant `height x width` maps.
    pub fn broadcast_spatial(&mut self, input: Var, height: usize, width: usize) -> Result<Var> {
        let (b, d) = self.value(input).dims2()?;
        let plane = height * width;
        let src = self.value(input).values();
        let mut out = Vec::with_capacity(b * d * plane);
        for &v in src {
            out.extend(std::iter::repeat_n(v, plane));
        }
        self.push(
            Tensor::new([b, d, height, width], out)?,
            Op::Broadcast { input, plane },
        )
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = match inputs.first() {
            Some(&f) => f,
            None => return shape_err("concat of zero tensors"),
        };
        let (b, _, h, w) = self.value(first).dims4()?;
        let mut parts = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (vb, vc, vh, vw) = self.value(v).dims4()?;
            if (vb, vh, vw) != (b, h, w) {
                return shape_err(format!(
                    "concat operands disagree: {:?} vs {:?}",
                    self.value(first).shape(),
                    self.value(v).shape()
                ));
            }
            parts.push((v, vc));
        }
        if inputs.len() == 1 {
            return Ok(first);
        }
        let plane = h * w;
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut out = Vec::with_capacity(b * total * plane);
        for n in 0..b {
            for &(v, c) in &parts {
                out.extend_from_slice(&self.value(v).values()[n * c * plane..(n + 1) * c * plane]);
            }
        }
        self.push(
            Tensor::new([b, total, h, w], out)?,
            Op::Concat {
                inputs: parts,
                batch: b,
                plane,
            },
        )
    }

    pub fn warp(&mut self, image: Var, flow: Var) -> Result<Var> {
        let field = FlowField::new(self.value(flow).clone())?;
        let out = sampler::warp(self.value(image), &field)?;
        self.push(out, Op::Warp { image, flow })
    }

    /// Blends towards white: `image * (1 - mask) + mask`, one mask channel for all colors.
    pub fn lightness_blend(&mut self, image: Var, mask: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(image).dims4()?;
        let (mb, mc, mh, mw) = self.value(mask).dims4()?;
        if (mb, mc, mh, mw) != (b, 1, h, w) {
            return shape_err(format!(
                "mask {:?} does not match image {:?}",
                self.value(mask).shape(),
                self.value(image).shape()
            ));
        }
        let plane = h * w;
        let img = self.value(image).values();
        let m = self.value(mask).values();
        let mut out = vec![T::zero(); img.len()];
        for n in 0..b {
            for ch in 0..c {
                for p in 0..plane {
                    let mv = m[n * plane + p];
                    let i = (n * c + ch) * plane + p;
                    out[i] = img[i] * (T::one() - mv) + mv;
                }
            }
        }
        self.push(Tensor::new([b, c, h, w], out)?, Op::Blend { image, mask })
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, input: Var, target: &Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != target.shape() {
            return shape_err(format!(
                "mse of {:?} against {:?}",
                x.shape(),
                target.shape()
            ));
        }
        let n = T::lit(x.numel() as f64);
        let s: T = x
            .values()
            .iter()
            .zip(target.values())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        self.push(
            Tensor::scalar(s / n),
            Op::Mse {
                input,
                target: target.values().to_vec(),
            },
        )
    }

    /// Registration-tolerant loss: per batch item, the smallest distance
    /// between the output and any `H x W` window of the enlarged target
    /// (offsets `0..=2k` on both axes, ties broken by the row-major
    /// smallest offset), averaged over the batch.
    pub fn registration_loss(
        &mut self,
        input: Var,
        target_big: &Tensor<T>,
        k: usize,
        dist: Distance,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        let (tb, tc, th, tw) = target_big.dims4()?;
        if (tb, tc, th, tw) != (b, c, h + 2 * k, w + 2 * k) {
            return shape_err(format!(
                "registration target {:?} must be the output {:?} enlarged by {k} on every side",
                target_big.shape(),
                self.value(input).shape()
            ));
        }
        let x = self.value(input).values();
        let t = target_big.values();
        let n = T::lit((c * h * w) as f64);
        let mut offsets = Vec::with_capacity(b);
        let mut total = T::zero();
        for item in 0..b {
            let mut best: Option<(T, (usize, usize))> = None;
            for i in 0..=2 * k {
                for j in 0..=2 * k {
                    let mut s = T::zero();
                    for ch in 0..c {
                        for y in 0..h {
                            let xr = &x[((item * c + ch) * h + y) * w..][..w];
                            let tr = &t[((item * c + ch) * th + y + i) * tw + j..][..w];
                            for (&a, &bb) in xr.iter().zip(tr) {
                                let d = a - bb;
                                s += match dist {
                                    Distance::L2 => d * d,
                                    Distance::L1 => d.abs(),
                                };
                            }
                        }
                    }
                    let d = s / n;
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, (i, j)));
                    }
                }
            }
            let (d, off) = best.expect("window is non-empty");
            total += d;
            offsets.push(off);
        }
        let loss = total / T::lit(b as f64);
        self.push(
            Tensor::scalar(loss),
            Op::Registration {
                input,
                target_big: target_big.clone(),
                offsets,
                k,
                dist,
            },
        )
    }

    /// Crop offsets `(row, col)` chosen by a registration loss node.
    pub fn registration_offsets(&self, loss: Var) -> Option<&[(usize, usize)]> {
        match &self.nodes[loss.0].op {
            Op::Registration { offsets, .. } => Some(offsets),
            _ => None,
        }
    }

    /// Propagates gradients from the scalar `loss` to every node it depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape(
                "backward already ran on this tape; re-run the forward pass first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            match g {
                Some(g) => node.value.set_grad(g)?,
                None => node.value.clear_grad(),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.values();
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            } => {
                let cg = kernels::conv2d_backward(val(*input), val(*weight), g, geom);
                accumulate(grads, *input, cg.input);
                accumulate(grads, *weight, cg.weight);
                accumulate(grads, *bias, cg.bias);
            }
            Op::BnTrain {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                layout,
            } => {
                let bg = kernels::batchnorm_train_backward(
                    val(*input),
                    val(*gamma),
                    mean,
                    inv_std,
                    g,
                    *layout,
                );
                accumulate(grads, *input, bg.input);
                accumulate(grads, *gamma, bg.gamma);
                accumulate(grads, *beta, bg.beta);
            }
            Op::BnInfer {
                input,
                gamma,
                beta,
                mean,
                var,
                eps,
                layout,
            } => {
                let bg = kernels::batchnorm_infer_backward(
                    val(*input),
                    val(*gamma),
                    mean,
                    var,
                    *eps,
                    g,
                    *layout,
                );
                accumulate(grads, *input, bg.input);
                accumulate(grads, *gamma, bg.gamma);
                accumulate(grads, *beta, bg.beta);
            }
            Op::Fc {
                input,
                weight,
                bias,
                rows,
                inner,
                outer,
            } => {
                let (dx, dw, db) =
                    kernels::fc_backward(val(*input), val(*weight), g, *rows, *inner, *outer);
                accumulate(grads, *input, dx);
                accumulate(grads, *weight, dw);
                accumulate(grads, *bias, db);
            }
            Op::Relu(input) => {
                let d = val(*input)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *input, d);
            }
            Op::Sigmoid(input) => {
                let d = node
                    .value
                    .values()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| gv * s * (T::one() - s))
                    .collect();
                accumulate(grads, *input, d);
            }
            Op::Scale(input, f) => {
                accumulate(grads, *input, g.iter().map(|&gv| gv * *f).collect());
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.to_vec());
            }
            Op::Sum(input) => {
                accumulate(grads, *input, vec![g[0]; val(*input).len()]);
            }
            Op::Upsample2x {
                input,
                planes,
                h,
                w,
            } => {
                accumulate(
                    grads,
                    *input,
                    kernels::upsample2x_backward(g, *planes, *h, *w),
                );
            }
            Op::ResizeEdge {
                input,
                planes,
                h,
                w,
                oh,
                ow,
            } => {
                accumulate(
                    grads,
                    *input,
                    kernels::resize_edge_backward(g, *planes, *h, *w, *oh, *ow),
                );
            }
            Op::Broadcast { input, plane } => {
                let d = g.chunks(*plane).map(|c| c.iter().copied().sum()).collect();
                accumulate(grads, *input, d);
            }
            Op::Concat {
                inputs,
                batch,
                plane,
            } => {
                let total: usize = inputs.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(v, c) in inputs {
                    let mut d = Vec::with_capacity(batch * c * plane);
                    for n in 0..*batch {
                        let base = (n * total + offset) * plane;
                        d.extend_from_slice(&g[base..base + c * plane]);
                    }
                    accumulate(grads, v, d);
                    offset += c;
                }
            }
            Op::Warp { image, flow } => {
                let img = &self.nodes[image.0].value;
                let field = FlowField::new(self.nodes[flow.0].value.clone())?;
                let up = Tensor::new(img.shape().to_vec(), g.to_vec())?;
                let (gi, gf) = sampler::warp_backward(img, &field, &up)?;
                accumulate(grads, *image, gi.into_values());
                accumulate(grads, *flow, gf.into_tensor().into_values());
            }
            Op::Blend { image, mask } => {
                let (b, c, h, w) = self.nodes[image.0].value.dims4()?;
                let plane = h * w;
                let img = val(*image);
                let m = val(*mask);
                let mut gi = vec![T::zero(); img.len()];
                let mut gm = vec![T::zero(); m.len()];
                for n in 0..b {
                    for ch in 0..c {
                        for p in 0..plane {
                            let i = (n * c + ch) * plane + p;
                            let mv = m[n * plane + p];
                            gi[i] = g[i] * (T::one() - mv);
                            gm[n * plane + p] += g[i] * (T::one() - img[i]);
                        }
                    }
                }
                accumulate(grads, *image, gi);
                accumulate(grads, *mask, gm);
            }
            Op::Mse { input, target } => {
                let x = val(*input);
                let k = g[0] * T::lit(2.0) / T::lit(x.len() as f64);
                accumulate(
                    grads,
                    *input,
                    x.iter().zip(target).map(|(&a, &b)| k * (a - b)).collect(),
                );
            }
            Op::Registration {
                input,
                target_big,
                offsets,
                k,
                dist,
            } => {
                let (b, c, h, w) = self.nodes[input.0].value.dims4()?;
                let (th, tw) = (h + 2 * k, w + 2 * k);
                let x = val(*input);
                let t = target_big.values();
                let scale = g[0] / T::lit((b * c * h * w) as f64);
                let mut d = vec![T::zero(); x.len()];
                for (item, &(i, j)) in offsets.iter().enumerate() {
                    for ch in 0..c {
                        for y in 0..h {
                            let xo = ((item * c + ch) * h + y) * w;
                            let to = ((item * c + ch) * th + y + i) * tw + j;
                            for xx in 0..w {
                                let diff = x[xo + xx] - t[to + xx];
                                d[xo + xx] = scale
                                    * match dist {
                                        Distance::L2 => T::lit(2.0) * diff,
                                        Distance::L1 => sign(diff),
                                    };
                            }
                        }
                    }
                }
                accumulate(grads, *input, d);
            }
        }
        Ok(())
    }
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => kernels::add_into(acc, &contribution),
        slot @ None => *slot = Some(contribution),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn([2, 3], |i| i as f64));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([3], 2.0));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Tape(_))));
        assert!(tape.relu(x).is_err());
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([3], 2.0));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn relu_forward_and_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).values(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        // derivative at exactly zero is zero
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_of_negated_positive_input_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new([4], vec![0.5, 1.0, 3.0, 0.1]).unwrap());
        let n = tape.scale(x, -1.0).unwrap();
        let r = tape.relu(n).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 0.0);
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new([2], vec![1.0, -2.0]).unwrap());
        let a = tape.scale(x, 3.0).unwrap();
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([2], 1.0));
        let y = tape.leaf(Tensor::full([2], 1.0));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(y).is_none());
    }

    #[test]
    fn concat_shape_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros([1, 2, 3, 3]));
        let b = tape.leaf(Tensor::zeros([1, 2, 3, 4]));
        assert!(matches!(
            tape.concat_channels(&[a, b]),
            Err(Error::Shape(_))
        ));
    }
}
