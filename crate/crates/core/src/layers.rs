//! Learnable layer parameters and their tape bindings.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tape::{BnBatchStats, BnMode, Tape, Var};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    BatchNorm,
    FullyConnected,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        match self {
            LayerKind::Conv => 1,
            LayerKind::BatchNorm => 2,
            LayerKind::FullyConnected => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(LayerKind::Conv),
            2 => Some(LayerKind::BatchNorm),
            3 => Some(LayerKind::FullyConnected),
            _ => None,
        }
    }
}

/// Parameters of one layer.
///
/// * conv: `weights` is `(out, in, kh, kw)`, `bias` is `(out)`;
/// * fully connected: `weights` is `(in, out)`, `bias` is `(out)`;
/// * batchnorm: `weights`/`bias` are the per-channel scale and shift, with
///   running statistics of the same extent.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    pub kind: LayerKind,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub running_mean: Option<Tensor<T>>,
    pub running_var: Option<Tensor<T>>,
    pub epsilon: T,
    pub momentum: T,
}

/// Tape handles of a layer's learnable tensors for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weights: Var,
    pub bias: Var,
}

impl<T: Real> LayerParams<T> {
    pub fn conv(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (co, _, kh, kw) = weights.dims4()?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return shape_err(format!("conv kernel extents must be odd, got {kh}x{kw}"));
        }
        if bias.shape() != [co] {
            return shape_err(format!(
                "conv bias shape {:?}, expected [{co}]",
                bias.shape()
            ));
        }
        Ok(Self::plain(LayerKind::Conv, weights, bias))
    }

    pub fn fully_connected(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (_, out) = weights.dims2()?;
        if bias.shape() != [out] {
            return shape_err(format!(
                "fully connected bias shape {:?}, expected [{out}]",
                bias.shape()
            ));
        }
        Ok(Self::plain(LayerKind::FullyConnected, weights, bias))
    }

    /// Fresh batchnorm with unit scale, zero shift and unit running variance.
    pub fn batchnorm(channels: usize) -> Self {
        Self {
            kind: LayerKind::BatchNorm,
            weights: Tensor::full([channels], T::one()),
            bias: Tensor::zeros([channels]),
            running_mean: Some(Tensor::zeros([channels])),
            running_var: Some(Tensor::full([channels], T::one())),
            epsilon: T::lit(BN_EPSILON),
            momentum: T::lit(BN_MOMENTUM),
        }
    }

    fn plain(kind: LayerKind, weights: Tensor<T>, bias: Tensor<T>) -> Self {
        Self {
            kind,
            weights,
            bias,
            running_mean: None,
            running_var: None,
            epsilon: T::lit(BN_EPSILON),
            momentum: T::lit(BN_MOMENTUM),
        }
    }

    /// Conv layer with fan-in-scaled uniform weights; `gain` scales the bound.
    pub fn conv_init(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let bound = gain * (6.0 / fan_in as f64).sqrt();
        let weights = Tensor::from_fn([out_channels, in_channels, kernel, kernel], |_| {
            T::lit(rng.gen_range(-bound..bound))
        });
        Self::conv(weights, Tensor::zeros([out_channels]))
    }

    pub fn fc_init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = (6.0 / inputs as f64).sqrt();
        let bias_bound = 1.0 / (inputs as f64).sqrt();
        let weights = Tensor::from_fn([inputs, outputs], |_| T::lit(rng.gen_range(-bound..bound)));
        let bias = Tensor::from_fn([outputs], |_| {
            T::lit(rng.gen_range(-bias_bound..bias_bound))
        });
        Self::fully_connected(weights, bias)
    }

    /// Learnable tensors in a fixed order: weights, then bias.
    pub fn learnable(&self) -> [&Tensor<T>; 2] {
        [&self.weights, &self.bias]
    }

    pub fn learnable_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weights, &mut self.bias]
    }

    /// Every stored tensor in declaration order, including running statistics.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.weights, &self.bias];
        out.extend(self.running_mean.as_ref());
        out.extend(self.running_var.as_ref());
        out
    }

    pub fn register(&self, tape: &mut Tape<T>) -> LayerVars {
        LayerVars {
            weights: tape.leaf(self.weights.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }

    /// Folds batch statistics into the running estimates by exponential moving average.
    pub fn update_running_stats(&mut self, stats: &BnBatchStats<T>) -> Result<()> {
        let m = self.momentum;
        let (rm, rv) = match (&mut self.running_mean, &mut self.running_var) {
            (Some(rm), Some(rv)) => (rm, rv),
            _ => {
                return Err(Error::Config(
                    "running statistics on a non-batchnorm layer".into(),
                ))
            }
        };
        if rm.numel() != stats.mean.len() {
            return shape_err("batch statistics do not match running statistics");
        }
        for (r, &b) in rm.values_mut().iter_mut().zip(&stats.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in rv.values_mut().iter_mut().zip(&stats.var_unbiased) {
            *r = (T::one() - m) * *r + m * b;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> LayerParams<U> {
        LayerParams {
            kind: self.kind,
            weights: self.weights.cast(),
            bias: self.bias.cast(),
            running_mean: self.running_mean.as_ref().map(Tensor::cast),
            running_var: self.running_var.as_ref().map(Tensor::cast),
            epsilon: U::lit(self.epsilon.as_f64()),
            momentum: U::lit(self.momentum.as_f64()),
        }
    }

    fn expect_kind(&self, kind: LayerKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!(
                "expected a {kind:?} layer, got {:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

pub fn conv2d_same<T: Real>(
    tape: &mut Tape<T>,
    input: Var,
    params: &LayerParams<T>,
    vars: LayerVars,
) -> Result<Var> {
    params.expect_kind(LayerKind::Conv)?;
    tape.conv2d_same(input, vars.weights, vars.bias)
}

pub fn fully_connected<T: Real>(
    tape: &mut Tape<T>,
    input: Var,
    params: &LayerParams<T>,
    vars: LayerVars,
) -> Result<Var> {
    params.expect_kind(LayerKind::FullyConnected)?;
    tape.fully_connected(input, vars.weights, vars.bias)
}

/// Batch normalization by batch statistics (training) or running statistics (inference).
pub fn batchnorm<T: Real>(
    tape: &mut Tape<T>,
    input: Var,
    params: &LayerParams<T>,
    vars: LayerVars,
    training: bool,
) -> Result<(Var, Option<BnBatchStats<T>>)> {
    params.expect_kind(LayerKind::BatchNorm)?;
    let mode = if training {
        BnMode::Train
    } else {
        match (&params.running_mean, &params.running_var) {
            (Some(m), Some(v)) => BnMode::Infer {
                running_mean: m.values(),
                running_var: v.values(),
            },
            _ => {
                return Err(Error::Config(
                    "batchnorm layer without running statistics".into(),
                ))
            }
        }
    };
    tape.batchnorm(input, vars.weights, vars.bias, params.epsilon, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_conv(input: Tensor<f64>, params: &LayerParams<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(input);
        let vars = params.register(&mut tape);
        let y = conv2d_same(&mut tape, x, params, vars).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let params =
            LayerParams::conv(Tensor::full([1, 1, 3, 3], 1.0), Tensor::zeros([1])).unwrap();
        let out = run_conv(Tensor::full([1, 1, 3, 3], 1.0), &params);
        assert_eq!(out.values()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(out.values()[corner], 4.0);
        }
    }

    #[test]
    fn unit_kernel_is_identity() {
        let params =
            LayerParams::conv(Tensor::full([1, 1, 1, 1], 1.0), Tensor::zeros([1])).unwrap();
        let input = Tensor::from_fn([2, 1, 4, 5], |i| (i as f64).cos());
        assert_eq!(run_conv(input.clone(), &params), input);
    }

    #[test]
    fn odd_kernels_preserve_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 3, 5, 7] {
            let params = LayerParams::<f64>::conv_init(2, 3, k, 1.0, &mut rng).unwrap();
            let out = run_conv(Tensor::full([1, 2, 6, 4], 0.5), &params);
            assert_eq!(out.shape(), &[1, 3, 6, 4]);
        }
    }

    #[test]
    fn even_kernel_and_channel_mismatch_rejected() {
        assert!(LayerParams::<f32>::conv(Tensor::zeros([1, 1, 2, 2]), Tensor::zeros([1])).is_err());
        let params =
            LayerParams::conv(Tensor::<f32>::zeros([1, 2, 3, 3]), Tensor::zeros([1])).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([1, 3, 4, 4]));
        let vars = params.register(&mut tape);
        assert!(matches!(
            conv2d_same(&mut tape, x, &params, vars),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn fc_identity_and_bias_rows() {
        let eye = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let params = LayerParams::fully_connected(eye, Tensor::zeros([3])).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn([2, 3], |i| i as f64 - 2.0));
        let vars = params.register(&mut tape);
        let y = fully_connected(&mut tape, x, &params, vars).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let params = LayerParams::fully_connected(
            Tensor::zeros([3, 2]),
            Tensor::new([2], vec![0.5, -1.5]).unwrap(),
        )
        .unwrap();
        let vars = params.register(&mut tape);
        let y = fully_connected(&mut tape, x, &params, vars).unwrap();
        assert_eq!(tape.value(y).values(), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn fc_inner_mismatch_rejected() {
        let params =
            LayerParams::fully_connected(Tensor::<f64>::zeros([4, 2]), Tensor::zeros([2])).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2, 3]));
        let vars = params.register(&mut tape);
        assert!(matches!(
            fully_connected(&mut tape, x, &params, vars),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn batchnorm_constant_channel_yields_shift() {
        let mut params = LayerParams::<f64>::batchnorm(2);
        params.bias = Tensor::new([2], vec![0.25, -3.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([1, 2, 3, 3], |i| {
            if i < 9 {
                7.0
            } else {
                -2.0
            }
        }));
        let vars = params.register(&mut tape);
        let (y, stats) = batchnorm(&mut tape, x, &params, vars, true).unwrap();
        let out = tape.value(y).values();
        assert!(out[..9].iter().all(|&v| v == 0.25));
        assert!(out[9..].iter().all(|&v| v == -3.0));
        assert_eq!(stats.unwrap().mean, vec![7.0, -2.0]);
    }

    #[test]
    fn batchnorm_running_stats_follow_ema() {
        let mut params = LayerParams::<f64>::batchnorm(1);
        let stats = BnBatchStats {
            mean: vec![2.0],
            var_unbiased: vec![3.0],
        };
        params.update_running_stats(&stats).unwrap();
        assert!((params.running_mean.as_ref().unwrap().values()[0] - 0.2).abs() < 1e-15);
        assert!((params.running_var.as_ref().unwrap().values()[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_on_wrong_kind_is_config_error() {
        let params =
            LayerParams::conv(Tensor::<f64>::zeros([1, 1, 1, 1]), Tensor::zeros([1])).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([1, 1, 2, 2]));
        let vars = params.register(&mut tape);
        assert!(matches!(
            batchnorm(&mut tape, x, &params, vars, true),
            Err(Error::Config(_))
        ));
    }
}
