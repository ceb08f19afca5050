//! Coarse-to-fine flow prediction and application.
//!
//! A half-scale tower predicts a coarse flow which is upsampled and applied
//! to the input; a full-scale tower sees the input stack together with the
//! coarse estimate and the coarse flow and predicts an additive residual.
//! The summed flow warps the input into the output. The single-scale and
//! multi-scale ablations reuse the same towers.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{self, AnchorSet, AngleSpec, EMBED_DIM, STACK_CHANNELS};
use crate::error::{shape_err, Error, Result};
use crate::layers::{self, LayerKind, LayerParams, LayerVars};
use crate::lcm;
use crate::real::Real;
use crate::sampler::FlowField;
use crate::tape::{BnBatchStats, Tape, Var};
use crate::tensor::Tensor;

pub const CROP_HEIGHT: usize = 41;
pub const CROP_WIDTH: usize = 51;
/// Scale applied to the fan-in bound of the flow-producing convolutions so
/// that a fresh model starts close to the identity warp.
pub const FLOW_INIT_GAIN: f64 = 0.1;
/// Initial bias of the mask logit: the lightness module starts nearly inert.
pub const MASK_INIT_BIAS: f64 = -4.0;

#[allow(clippy::upper_case_acronyms)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// One full-scale warping module.
    SS,
    /// Two scales; half-scale features feed the full-scale module, no coarse warp.
    MS,
    /// Coarse-to-fine warping.
    CFW,
    /// Coarse-to-fine warping followed by lightness correction.
    #[serde(rename = "CFW_LCM")]
    CfwLcm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::SS, Variant::MS, Variant::CFW, Variant::CfwLcm];

    pub fn has_coarse(self) -> bool {
        self != Variant::SS
    }

    pub fn has_lcm(self) -> bool {
        self == Variant::CfwLcm
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Variant::SS => "SS",
            Variant::MS => "MS",
            Variant::CFW => "CFW",
            Variant::CfwLcm => "CFW_LCM",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SS" => Ok(Variant::SS),
            "MS" => Ok(Variant::MS),
            "CFW" => Ok(Variant::CFW),
            "CFW_LCM" | "CFW+LCM" => Ok(Variant::CfwLcm),
            other => Err(Error::Config(format!("unknown model variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Output channels of each convolution of a warping module; the last is the 2-channel flow.
    pub tower_channels: Vec<usize>,
    pub first_kernel: usize,
    pub kernel_size: usize,
    /// Output channels of the lightness module convolutions; the last is the 1-channel mask.
    pub lcm_channels: Vec<usize>,
    pub lcm_kernel: usize,
    /// 1 for vertical-only redirection, 2 for vertical and horizontal.
    pub angle_dims: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::CfwLcm,
            tower_channels: vec![32, 64, 32, 16, 2],
            first_kernel: 5,
            kernel_size: 3,
            lcm_channels: vec![16, 8, 1],
            lcm_kernel: 3,
            angle_dims: 1,
            height: CROP_HEIGHT,
            width: CROP_WIDTH,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn conv_layers_per_module(&self) -> usize {
        self.tower_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.tower_channels.len() < 3 {
            return bad("a warping module needs at least 3 convolutions".into());
        }
        if self.tower_channels.last() != Some(&2) {
            return bad(
                "the last convolution of a warping module must output the 2-channel flow".into(),
            );
        }
        if self.lcm_channels.last() != Some(&1) {
            return bad("the last lightness convolution must output a single mask channel".into());
        }
        for k in [self.first_kernel, self.kernel_size, self.lcm_kernel] {
            if k % 2 == 0 {
                return bad(format!("kernel sizes must be odd, got {k}"));
            }
        }
        if !(1..=2).contains(&self.angle_dims) {
            return bad(format!(
                "angle_dims must be 1 or 2, got {}",
                self.angle_dims
            ));
        }
        if self.height < 2 || self.width < 2 {
            return bad("input extents must be at least 2x2".into());
        }
        if self
            .tower_channels
            .iter()
            .chain(&self.lcm_channels)
            .any(|&c| c == 0)
        {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }

    /// Input channels of the full-scale module for this variant.
    pub fn fine_input_channels(&self) -> usize {
        match self.variant {
            Variant::SS => STACK_CHANNELS,
            Variant::MS => STACK_CHANNELS + self.tower_channels[self.tower_channels.len() - 2],
            Variant::CFW | Variant::CfwLcm => STACK_CHANNELS + 3 + 2,
        }
    }

    pub fn lcm_input_channels(&self) -> usize {
        2 * self.tower_channels[2] + 3
    }
}

/// Convolutions with batchnorm + ReLU after each, except a linear final
/// convolution when `linear_head` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Tower<T = f32> {
    pub convs: Vec<LayerParams<T>>,
    pub norms: Vec<LayerParams<T>>,
    pub linear_head: bool,
}

impl<T: Real> Tower<T> {
    fn init(
        in_channels: usize,
        channels: &[usize],
        first_kernel: usize,
        kernel: usize,
        linear_head: bool,
        head_gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(channels.len());
        let mut norms = Vec::new();
        let mut cin = in_channels;
        for (i, &cout) in channels.iter().enumerate() {
            let k = if i == 0 { first_kernel } else { kernel };
            let head = linear_head && i + 1 == channels.len();
            let gain = if head { head_gain } else { 1.0 };
            convs.push(LayerParams::conv_init(cin, cout, k, gain, rng)?);
            if !head {
                norms.push(LayerParams::batchnorm(cout));
            }
            cin = cout;
        }
        Ok(Self {
            convs,
            norms,
            linear_head,
        })
    }

    /// Layers in declaration order: conv, bn, conv, bn, ..., [conv].
    pub fn layers(&self) -> Vec<&LayerParams<T>> {
        let mut out = Vec::with_capacity(self.convs.len() + self.norms.len());
        for (i, c) in self.convs.iter().enumerate() {
            out.push(c);
            if let Some(n) = self.norms.get(i) {
                out.push(n);
            }
        }
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut LayerParams<T>> {
        let mut norms: Vec<Option<&mut LayerParams<T>>> = self.norms.iter_mut().map(Some).collect();
        let mut out = Vec::with_capacity(self.convs.len() + norms.len());
        for (i, c) in self.convs.iter_mut().enumerate() {
            out.push(c);
            if let Some(n) = norms.get_mut(i).and_then(Option::take) {
                out.push(n);
            }
        }
        out
    }

    fn layer_count(&self) -> usize {
        self.convs.len() + self.norms.len()
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].weights.shape()[1]
    }

    /// Zeroes every convolution weight and bias.
    pub fn zero_convs(&mut self) {
        for c in &mut self.convs {
            c.weights.values_mut().fill(T::zero());
            c.bias.values_mut().fill(T::zero());
        }
    }

    fn cast<U: Real>(&self) -> Tower<U> {
        Tower {
            convs: self.convs.iter().map(LayerParams::cast).collect(),
            norms: self.norms.iter().map(LayerParams::cast).collect(),
            linear_head: self.linear_head,
        }
    }
}

/// Activations produced by a tower pass.
pub struct TowerOutput {
    pub output: Var,
    /// Post-activation output of the third convolution.
    pub third: Var,
    /// Input to the final convolution.
    pub penultimate: Var,
}

/// All learnable parameters of one model variant.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T = f32> {
    pub config: ModelConfig,
    pub embed: [LayerParams<T>; 2],
    pub coarse: Option<Tower<T>>,
    pub fine: Tower<T>,
    pub lcm: Option<Tower<T>>,
}

impl<T: Real> ModelWeights<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = [
            LayerParams::fc_init(config.angle_dims, EMBED_DIM, &mut rng)?,
            LayerParams::fc_init(EMBED_DIM, EMBED_DIM, &mut rng)?,
        ];
        let tc = &config.tower_channels;
        let coarse = match config.variant {
            Variant::SS => None,
            Variant::MS => Some(Tower::init(
                STACK_CHANNELS,
                &tc[..tc.len() - 1],
                config.first_kernel,
                config.kernel_size,
                false,
                1.0,
                &mut rng,
            )?),
            Variant::CFW | Variant::CfwLcm => Some(Tower::init(
                STACK_CHANNELS,
                tc,
                config.first_kernel,
                config.kernel_size,
                true,
                FLOW_INIT_GAIN,
                &mut rng,
            )?),
        };
        let fine = Tower::init(
            config.fine_input_channels(),
            tc,
            config.first_kernel,
            config.kernel_size,
            true,
            FLOW_INIT_GAIN,
            &mut rng,
        )?;
        let lcm = if config.variant.has_lcm() {
            let mut t = Tower::init(
                config.lcm_input_channels(),
                &config.lcm_channels,
                config.lcm_kernel,
                config.lcm_kernel,
                true,
                FLOW_INIT_GAIN,
                &mut rng,
            )?;
            let head = t.convs.last_mut().expect("non-empty tower");
            head.bias.values_mut().fill(T::lit(MASK_INIT_BIAS));
            Some(t)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            embed,
            coarse,
            fine,
            lcm,
        })
    }

    /// Every layer in fixed declaration order: angle MLP, coarse module,
    /// fine module, lightness module.
    pub fn layers(&self) -> Vec<&LayerParams<T>> {
        let mut out: Vec<&LayerParams<T>> = self.embed.iter().collect();
        if let Some(c) = &self.coarse {
            out.extend(c.layers());
        }
        out.extend(self.fine.layers());
        if let Some(l) = &self.lcm {
            out.extend(l.layers());
        }
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut LayerParams<T>> {
        let mut out: Vec<&mut LayerParams<T>> = self.embed.iter_mut().collect();
        if let Some(c) = &mut self.coarse {
            out.extend(c.layers_mut());
        }
        out.extend(self.fine.layers_mut());
        if let Some(l) = &mut self.lcm {
            out.extend(l.layers_mut());
        }
        out
    }

    /// Learnable tensors (weights then bias of every layer, in declaration order).
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers()
            .into_iter()
            .flat_map(|l| l.learnable())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| l.learnable_mut())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Checks layer shapes against the configuration.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let expect = ModelWeights::<T>::init(cfg, 0)?;
        let mine = self.layers();
        let theirs = expect.layers();
        if mine.len() != theirs.len() {
            return Err(Error::Config(format!(
                "variant {} expects {} layers, weights hold {}",
                cfg.variant,
                theirs.len(),
                mine.len()
            )));
        }
        for (i, (a, b)) in mine.iter().zip(&theirs).enumerate() {
            let sa: Vec<_> = a.tensors().iter().map(|t| t.shape().to_vec()).collect();
            let sb: Vec<_> = b.tensors().iter().map(|t| t.shape().to_vec()).collect();
            if a.kind != b.kind || sa != sb {
                return Err(Error::Config(format!(
                    "layer {i} is {:?} {sa:?}, configuration expects {:?} {sb:?}",
                    a.kind, b.kind
                )));
            }
        }
        Ok(())
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn apply_bn_stats(&mut self, stats: &[(usize, BnBatchStats<T>)]) -> Result<()> {
        let mut layers = self.layers_mut();
        for (idx, s) in stats {
            let layer = layers.get_mut(*idx).ok_or_else(|| {
                Error::Config(format!("batch statistics for missing layer {idx}"))
            })?;
            layer.update_running_stats(s)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            config: self.config.clone(),
            embed: [self.embed[0].cast(), self.embed[1].cast()],
            coarse: self.coarse.as_ref().map(Tower::cast),
            fine: self.fine.cast(),
            lcm: self.lcm.as_ref().map(Tower::cast),
        }
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let coarse = 2;
        let fine = coarse + self.coarse.as_ref().map_or(0, Tower::layer_count);
        let lcm = fine + self.fine.layer_count();
        (coarse, fine, lcm)
    }

    /// Runs the full model on a batch; see [`ForwardOutput`].
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch<T>,
        training: bool,
    ) -> Result<ForwardOutput<T>> {
        let cfg = &self.config;
        if self.coarse.is_some() != cfg.variant.has_coarse()
            || self.lcm.is_some() != cfg.variant.has_lcm()
        {
            return Err(Error::Config(format!(
                "weights do not match variant {}",
                cfg.variant
            )));
        }
        let (b, c, h, w) = batch.images.dims4()?;
        if c != 3 || batch.anchors.len() != b || batch.angles.len() != b {
            return shape_err(format!(
                "batch of {b} images needs {b} anchor sets and {b} angles"
            ));
        }
        let vars: Vec<LayerVars> = self.layers().iter().map(|l| l.register(tape)).collect();
        let mut ctx = Ctx {
            tape,
            vars: &vars,
            stats: Vec::new(),
            training,
        };

        let angles = ctx
            .tape
            .leaf(encoding::angle_tensor(&batch.angles, cfg.angle_dims));
        let embedding = encoding::embed_angle(
            ctx.tape,
            angles,
            [(&self.embed[0], vars[0]), (&self.embed[1], vars[1])],
        )?;
        let image = ctx.tape.leaf(batch.images.clone());
        let stack_full = encoding::input_stack_on_tape(ctx.tape, image, &batch.anchors, embedding)?;

        let (coarse_off, fine_off, lcm_off) = self.offsets();
        let mut coarse_flow = None;
        let mut coarse_output = None;
        let mut aux_half = None;

        let fine_input = match (cfg.variant, &self.coarse) {
            (Variant::SS, _) => stack_full,
            (variant, Some(coarse)) => {
                let half_images = ctx.tape.leaf(encoding::downsample2x(&batch.images)?);
                let half_anchors: Vec<AnchorSet> =
                    batch.anchors.iter().map(|a| a.scaled(0.5)).collect();
                let stack_half =
                    encoding::input_stack_on_tape(ctx.tape, half_images, &half_anchors, embedding)?;
                let tower = ctx.run_tower(coarse, coarse_off, stack_half)?;
                aux_half = Some(tower.third);
                if variant == Variant::MS {
                    let up = ctx.tape.upsample2x(tower.output)?;
                    let up = ctx.tape.resize_edge(up, h, w)?;
                    ctx.tape.concat_channels(&[stack_full, up])?
                } else {
                    let d_coarse = upsample_flow(ctx.tape, tower.output, h, w)?;
                    let o_coarse = ctx.tape.warp(image, d_coarse)?;
                    coarse_flow = Some(d_coarse);
                    coarse_output = Some(o_coarse);
                    ctx.tape
                        .concat_channels(&[stack_full, o_coarse, d_coarse])?
                }
            }
            (v, None) => return Err(Error::Config(format!("variant {v} needs a coarse module"))),
        };

        let fine = ctx.run_tower(&self.fine, fine_off, fine_input)?;
        let flow = match coarse_flow {
            Some(d_coarse) => ctx.tape.add(d_coarse, fine.output)?,
            None => fine.output,
        };
        let warped = ctx.tape.warp(image, flow)?;

        let (output, mask) = match &self.lcm {
            Some(lcm_tower) => {
                let half = aux_half.ok_or_else(|| {
                    Error::Config("lightness module needs half-scale features".into())
                })?;
                let up = ctx.tape.upsample2x(half)?;
                let up = ctx.tape.resize_edge(up, h, w)?;
                let lcm_input = ctx.tape.concat_channels(&[up, fine.third, warped])?;
                let logits = ctx.run_tower(lcm_tower, lcm_off, lcm_input)?;
                let mask = ctx.tape.sigmoid(logits.output)?;
                (lcm::apply_lightness(ctx.tape, warped, mask)?, Some(mask))
            }
            None => (warped, None),
        };

        let aux = if cfg.variant.has_lcm() {
            aux_half.map(|a| (a, fine.third))
        } else {
            None
        };
        let bn_stats = ctx.stats;
        Ok(ForwardOutput {
            output,
            warped,
            flow,
            coarse_flow,
            coarse_output,
            mask,
            aux,
            bn_stats,
            layer_vars: vars,
        })
    }

    /// Inference-mode prediction without keeping the tape.
    pub fn predict(&self, batch: &Batch<T>) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, batch, false)?;
        Ok(Prediction {
            output: tape.value(fwd.output).clone(),
            warped: tape.value(fwd.warped).clone(),
            flow: FlowField::new(tape.value(fwd.flow).clone())?,
            coarse_output: fwd.coarse_output.map(|v| tape.value(v).clone()),
            mask: fwd.mask.map(|v| tape.value(v).clone()),
        })
    }
}

/// Gradients of every learnable tensor, aligned with [`ModelWeights::params`];
/// tensors that did not reach the loss get zeros.
pub fn collect_grads<T: Real>(tape: &Tape<T>, fwd: &ForwardOutput<T>) -> Vec<Vec<T>> {
    fwd.layer_vars
        .iter()
        .flat_map(|v| [v.weights, v.bias])
        .map(|v| match tape.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); tape.value(v).numel()],
        })
        .collect()
}

struct Ctx<'a, T: Real> {
    tape: &'a mut Tape<T>,
    vars: &'a [LayerVars],
    stats: Vec<(usize, BnBatchStats<T>)>,
    training: bool,
}

impl<T: Real> Ctx<'_, T> {
    fn run_tower(
        &mut self,
        tower: &Tower<T>,
        first_layer: usize,
        input: Var,
    ) -> Result<TowerOutput> {
        let mut x = input;
        let mut layer = first_layer;
        let mut third = None;
        let mut penultimate = input;
        for (i, conv) in tower.convs.iter().enumerate() {
            debug_assert_eq!(conv.kind, LayerKind::Conv);
            penultimate = x;
            x = layers::conv2d_same(self.tape, x, conv, self.vars[layer])?;
            layer += 1;
            if let Some(norm) = tower.norms.get(i) {
                let (y, stats) =
                    layers::batchnorm(self.tape, x, norm, self.vars[layer], self.training)?;
                if let Some(s) = stats {
                    self.stats.push((layer, s));
                }
                layer += 1;
                x = self.tape.relu(y)?;
            }
            if i == 2 {
                third = Some(x);
            }
        }
        let third =
            third.ok_or_else(|| Error::Config("tower has fewer than three convolutions".into()))?;
        if !tower.linear_head {
            penultimate = x;
        }
        Ok(TowerOutput {
            output: x,
            third,
            penultimate,
        })
    }
}

/// One batch of model inputs.
#[derive(Clone, Debug)]
pub struct Batch<T = f32> {
    /// `[B, 3, H, W]` images in `[0, 1]`.
    pub images: Tensor<T>,
    pub anchors: Vec<AnchorSet>,
    /// Requested corrections.
    pub angles: Vec<AngleSpec>,
}

impl<T: Real> Batch<T> {
    pub fn single(image: Tensor<T>, anchors: AnchorSet, angle: AngleSpec) -> Result<Self> {
        let (c, h, w) = match *image.shape() {
            [c, h, w] => (c, h, w),
            [1, c, h, w] => (c, h, w),
            ref s => return shape_err(format!("expected a CHW image, got {s:?}")),
        };
        Ok(Self {
            images: image.reshape([1, c, h, w])?,
            anchors: vec![anchors],
            angles: vec![angle],
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Tape handles of one forward pass.
pub struct ForwardOutput<T> {
    /// Final output (after lightness correction when present).
    pub output: Var,
    /// Output of the final warp.
    pub warped: Var,
    /// Total flow `D`.
    pub flow: Var,
    /// Upsampled coarse flow, coarse-to-fine variants only.
    pub coarse_flow: Option<Var>,
    /// Coarse estimate, coarse-to-fine variants only.
    pub coarse_output: Option<Var>,
    pub mask: Option<Var>,
    /// Third-convolution activations of the half- and full-scale modules,
    /// exposed for the lightness-corrected variant.
    pub aux: Option<(Var, Var)>,
    /// Training-mode batch statistics keyed by layer index.
    pub bn_stats: Vec<(usize, BnBatchStats<T>)>,
    pub layer_vars: Vec<LayerVars>,
}

#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub output: Tensor<T>,
    pub warped: Tensor<T>,
    pub flow: FlowField<T>,
    pub coarse_output: Option<Tensor<T>>,
    pub mask: Option<Tensor<T>>,
}

/// Half-scale flow of the coarse module, in half-scale pixels.
pub fn coarse_flow<T: Real>(
    tape: &mut Tape<T>,
    weights: &ModelWeights<T>,
    vars: &[LayerVars],
    stack_half: Var,
    training: bool,
) -> Result<Var> {
    let coarse = weights
        .coarse
        .as_ref()
        .ok_or_else(|| Error::Config("variant has no coarse module".into()))?;
    let mut ctx = Ctx {
        tape,
        vars,
        stats: Vec::new(),
        training,
    };
    Ok(ctx.run_tower(coarse, 2, stack_half)?.output)
}

/// Upsamples a half-scale flow to `height x width` and converts it to
/// full-scale pixels (values doubled). Odd extents are filled by edge
/// replication.
pub fn upsample_flow<T: Real>(
    tape: &mut Tape<T>,
    flow_half: Var,
    height: usize,
    width: usize,
) -> Result<Var> {
    let (_, c, _, _) = tape.value(flow_half).dims4()?;
    if c != 2 {
        return shape_err(format!("flow must have 2 channels, got {c}"));
    }
    let up = tape.upsample2x(flow_half)?;
    let up = tape.resize_edge(up, height, width)?;
    tape.scale(up, T::lit(2.0))
}

/// Coarse estimate: the input warped by the upsampled coarse flow.
pub fn coarse_estimate<T: Real>(tape: &mut Tape<T>, image: Var, flow: Var) -> Result<Var> {
    tape.warp(image, flow)
}

/// Full-scale residual flow and the amended total `D_coarse + D_res`.
/// Returns `(d_res, d_total)`.
pub fn residual_flow<T: Real>(
    tape: &mut Tape<T>,
    weights: &ModelWeights<T>,
    vars: &[LayerVars],
    stack_full: Var,
    o_coarse: Var,
    d_coarse: Var,
    training: bool,
) -> Result<(Var, Var)> {
    let input = tape.concat_channels(&[stack_full, o_coarse, d_coarse])?;
    let (_, fine_off, _) = weights.offsets();
    let mut ctx = Ctx {
        tape,
        vars,
        stats: Vec::new(),
        training,
    };
    let d_res = ctx.run_tower(&weights.fine, fine_off, input)?.output;
    let total = tape.add(d_coarse, d_res)?;
    Ok((d_res, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            tower_channels: vec![4, 6, 4, 3, 2],
            lcm_channels: vec![3, 2, 1],
            height: 9,
            width: 11,
            ..ModelConfig::default()
        }
    }

    fn toy_batch(h: usize, w: usize) -> Batch<f64> {
        let images = Tensor::from_fn([2, 3, h, w], |i| 0.5 + 0.4 * ((i as f64) * 0.71).sin());
        let anchors = AnchorSet::new([
            [0.5, 4.0],
            [2.5, 2.0],
            [7.0, 2.0],
            [10.0, 4.5],
            [7.5, 6.5],
            [3.0, 6.5],
            [5.0, 4.0],
        ])
        .unwrap();
        Batch {
            images,
            anchors: vec![anchors; 2],
            angles: vec![AngleSpec::vertical(12.0), AngleSpec::vertical(-20.0)],
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("XX".parse::<Variant>().is_err());
    }

    #[test]
    fn fine_input_is_38_channels_for_cfw() {
        let cfg = ModelConfig::with_variant(Variant::CFW);
        assert_eq!(cfg.fine_input_channels(), 38);
        assert_eq!(
            ModelConfig::with_variant(Variant::SS).fine_input_channels(),
            33
        );
        assert_eq!(
            ModelConfig::with_variant(Variant::MS).fine_input_channels(),
            33 + 16
        );
        assert_eq!(cfg.lcm_input_channels(), 67);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            ModelConfig {
                tower_channels: vec![8, 8, 3],
                ..ModelConfig::default()
            },
            ModelConfig {
                kernel_size: 4,
                ..ModelConfig::default()
            },
            ModelConfig {
                angle_dims: 3,
                ..ModelConfig::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn zero_weights_resynthesize_the_input() {
        for variant in Variant::ALL {
            let mut w = ModelWeights::<f64>::init(&toy_config(variant), 1).unwrap();
            if let Some(c) = &mut w.coarse {
                c.zero_convs();
            }
            w.fine.zero_convs();
            if let Some(l) = &mut w.lcm {
                l.zero_convs();
                l.convs.last_mut().unwrap().bias.values_mut().fill(-1e3);
            }
            let batch = toy_batch(9, 11);
            let p = w.predict(&batch).unwrap();
            assert_eq!(p.warped, batch.images, "{variant}");
            assert!(p.flow.tensor().values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn output_shapes_and_aux() {
        let w = ModelWeights::<f64>::init(&toy_config(Variant::CfwLcm), 2).unwrap();
        let mut tape = Tape::new();
        let fwd = w.forward(&mut tape, &toy_batch(9, 11), true).unwrap();
        assert_eq!(tape.value(fwd.output).shape(), &[2, 3, 9, 11]);
        assert_eq!(tape.value(fwd.flow).shape(), &[2, 2, 9, 11]);
        assert_eq!(tape.value(fwd.mask.unwrap()).shape(), &[2, 1, 9, 11]);
        let (half, full) = fwd.aux.unwrap();
        assert_eq!(tape.value(half).shape(), &[2, 4, 4, 5]);
        assert_eq!(tape.value(full).shape(), &[2, 4, 9, 11]);

        let w = ModelWeights::<f64>::init(&toy_config(Variant::CFW), 2).unwrap();
        let mut tape = Tape::new();
        assert!(w
            .forward(&mut tape, &toy_batch(9, 11), false)
            .unwrap()
            .aux
            .is_none());
    }

    #[test]
    fn fully_convolutional_across_extents() {
        let w = ModelWeights::<f64>::init(&toy_config(Variant::CfwLcm), 3).unwrap();
        for (h, w_) in [(9, 11), (12, 7), (41, 51)] {
            let p = w.predict(&toy_batch(h, w_)).unwrap();
            assert_eq!(p.output.shape(), &[2, 3, h, w_]);
        }
    }

    #[test]
    fn mismatched_weights_are_a_config_error() {
        let mut w = ModelWeights::<f64>::init(&toy_config(Variant::CFW), 4).unwrap();
        w.config.variant = Variant::SS;
        assert!(matches!(
            w.predict(&toy_batch(9, 11)),
            Err(Error::Config(_))
        ));
        assert!(w.validate().is_err());
    }

    #[test]
    fn default_model_layer_count_and_size() {
        let w = ModelWeights::<f32>::init(&ModelConfig::default(), 0).unwrap();
        w.validate().unwrap();
        // 2 fc + 2 towers of 5 conv/4 bn + lcm of 3 conv/2 bn
        assert_eq!(w.layers().len(), 2 + 9 + 9 + 5);
        assert!(w.num_params() * 4 < 1 << 20);
    }

    #[test]
    fn upsampled_constant_flow_doubles() {
        let mut tape = Tape::<f64>::new();
        let half = tape.leaf(FlowField::constant(1, 20, 25, 1.0, 0.0).into_tensor());
        let full = upsample_flow(&mut tape, half, 41, 51).unwrap();
        let v = tape.value(full);
        assert_eq!(v.shape(), &[1, 2, 41, 51]);
        let plane = 41 * 51;
        assert!(v.values()[..plane].iter().all(|&x| x == 2.0));
        assert!(v.values()[plane..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_fine_tower_gives_coarse_flow() {
        let mut w = ModelWeights::<f64>::init(&toy_config(Variant::CFW), 5).unwrap();
        w.fine.zero_convs();
        let mut tape = Tape::new();
        let fwd = w.forward(&mut tape, &toy_batch(9, 11), false).unwrap();
        assert_eq!(tape.value(fwd.flow), tape.value(fwd.coarse_flow.unwrap()));
        assert_eq!(
            tape.value(fwd.output),
            tape.value(fwd.coarse_output.unwrap())
        );
    }

    #[test]
    fn both_towers_and_embedding_receive_gradient() {
        let w = ModelWeights::<f64>::init(&toy_config(Variant::CFW), 6).unwrap();
        let batch = toy_batch(9, 11);
        let mut tape = Tape::new();
        let fwd = w.forward(&mut tape, &batch, true).unwrap();
        let target = batch.images.map(|v| 1.0 - v);
        let loss = tape.mse(fwd.output, &target).unwrap();
        tape.backward(loss).unwrap();
        let grads = collect_grads(&tape, &fwd);
        let norm = |range: std::ops::Range<usize>| -> f64 {
            grads[range].iter().flatten().map(|g| g * g).sum()
        };
        // params: 2 fc layers (4 tensors), coarse tower 9 layers (18), fine tower 9 layers (18)
        assert!(norm(0..4) > 0.0, "embedding");
        assert!(norm(4..22) > 0.0, "coarse tower");
        assert!(norm(22..40) > 0.0, "fine tower");
    }

    #[test]
    fn split_stages_match_forward() {
        let w = ModelWeights::<f64>::init(&toy_config(Variant::CFW), 7).unwrap();
        let batch = toy_batch(9, 11);
        let full = w.predict(&batch).unwrap();

        let mut tape = Tape::new();
        let vars: Vec<LayerVars> = w.layers().iter().map(|l| l.register(&mut tape)).collect();
        let angles = tape.leaf(encoding::angle_tensor(&batch.angles, 1));
        let emb = encoding::embed_angle(
            &mut tape,
            angles,
            [(&w.embed[0], vars[0]), (&w.embed[1], vars[1])],
        )
        .unwrap();
        let image = tape.leaf(batch.images.clone());
        let stack_full =
            encoding::input_stack_on_tape(&mut tape, image, &batch.anchors, emb).unwrap();
        let half_img = tape.leaf(encoding::downsample2x(&batch.images).unwrap());
        let half_anchors: Vec<_> = batch.anchors.iter().map(|a| a.scaled(0.5)).collect();
        let stack_half =
            encoding::input_stack_on_tape(&mut tape, half_img, &half_anchors, emb).unwrap();
        let dh = coarse_flow(&mut tape, &w, &vars, stack_half, false).unwrap();
        assert_eq!(tape.value(dh).shape(), &[2, 2, 4, 5]);
        let dc = upsample_flow(&mut tape, dh, 9, 11).unwrap();
        let oc = coarse_estimate(&mut tape, image, dc).unwrap();
        let (_, d) = residual_flow(&mut tape, &w, &vars, stack_full, oc, dc, false).unwrap();
        assert_eq!(tape.value(d), full.flow.tensor());
        assert_eq!(Some(tape.value(oc)), full.coarse_output.as_ref());
    }
}
