//! Optimization: stratified batch sampling over correction-angle bins,
//! the plain and registration-tolerant losses, Adam, and the training loop
//! with validation, metrics logging and checkpoints.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, PairRef, TrainingPair, TARGET_MARGIN};
use crate::encoding::MAX_ANGLE;
use crate::error::{Error, Result};
use crate::eval;
use crate::real::Real;
use crate::tape::{Distance, Tape, Var};
use crate::tensor::Tensor;
use crate::warping_net::{collect_grads, Batch, ModelConfig, ModelWeights};
use crate::weights_io;

pub const NUM_BINS: usize = 15;
pub const BIN_WIDTH: f32 = 2.0 * MAX_ANGLE / NUM_BINS as f32;

/// Bin of a correction angle: `[-30 + 4m, -30 + 4(m+1))`, the last bin
/// closed at +30. `None` outside the range.
pub fn bin_index(angle: f32) -> Option<usize> {
    if !(-MAX_ANGLE..=MAX_ANGLE).contains(&angle) {
        return None;
    }
    Some((((angle + MAX_ANGLE) / BIN_WIDTH).floor() as usize).min(NUM_BINS - 1))
}

pub fn bin_range(bin: usize) -> (f32, f32) {
    let lo = -MAX_ANGLE + BIN_WIDTH * bin as f32;
    (lo, lo + BIN_WIDTH)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L2Plain,
    RegistrationL2,
    RegistrationL1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `learning_rate` over `iterations` steps.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub bins: usize,
    pub bins_per_batch: usize,
    pub easy_per_bin: usize,
    pub hard_per_bin: usize,
    pub hard_tilt_threshold: f32,
    pub loss: LossKind,
    pub k: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    /// Cosine schedule only: the rate at the last step, as a fraction of
    /// `learning_rate`.
    pub final_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub iterations: u64,
    pub seed: u64,
    /// Each sampled pair is mirrored with probability one half.
    pub mirror: bool,
    /// Validation every this many steps (0 disables).
    pub val_every: u64,
    /// Size of the fixed validation subset.
    pub val_pairs: usize,
    /// Checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    pub val_persons: usize,
    pub test_persons: usize,
    pub divergence_factor: f64,
    pub divergence_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            bins: NUM_BINS,
            bins_per_batch: 4,
            easy_per_bin: 24,
            hard_per_bin: 8,
            hard_tilt_threshold: 8.0,
            loss: LossKind::RegistrationL1,
            k: TARGET_MARGIN,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Constant,
            final_lr_fraction: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            iterations: 20_000,
            seed: 0,
            mirror: true,
            val_every: 500,
            val_pairs: 96,
            checkpoint_every: 0,
            val_persons: 1,
            test_persons: 3,
            divergence_factor: 10.0,
            divergence_window: 100,
        }
    }
}

impl TrainConfig {
    /// Learning rate of loop step `step`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = step as f64 / self.iterations.saturating_sub(1).max(1) as f64;
                let f = self.final_lr_fraction;
                self.learning_rate
                    * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos()))
            }
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.bins != NUM_BINS {
            return bad(format!("the bin layout is fixed at {NUM_BINS} bins"));
        }
        if self.bins_per_batch * (self.easy_per_bin + self.hard_per_bin) != self.batch_size {
            return bad(format!(
                "bins_per_batch x (easy_per_bin + hard_per_bin) = {} must equal batch_size {}",
                self.bins_per_batch * (self.easy_per_bin + self.hard_per_bin),
                self.batch_size
            ));
        }
        if self.bins_per_batch == 0 || self.bins_per_batch > self.bins {
            return bad(format!("bins_per_batch must be in 1..={}", self.bins));
        }
        if self.k != TARGET_MARGIN && self.loss != LossKind::L2Plain {
            return bad(format!(
                "registration loss needs k = {TARGET_MARGIN} to match the stored target margin"
            ));
        }
        if !(self.learning_rate > 0.0)
            || !(0.0..=1.0).contains(&self.final_lr_fraction)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return bad("invalid optimizer hyperparameters".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// sampler

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BinStrata {
    pub easy: Vec<usize>,
    pub hard: Vec<usize>,
}

impl BinStrata {
    pub fn len(&self) -> usize {
        self.easy.len() + self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pair indices grouped by correction bin and split by head tilt.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerIndex {
    pub bins: Vec<BinStrata>,
}

pub fn is_hard(tilt: f32, threshold: f32) -> bool {
    tilt.abs() >= threshold
}

/// Bins pairs by vertical correction and splits each bin into easy and
/// hard strata. Pairs outside the angle range are dropped.
pub fn build_sampler_index(pairs: &[PairRef], config: &TrainConfig) -> Result<SamplerIndex> {
    let mut bins = vec![BinStrata::default(); NUM_BINS];
    for (i, p) in pairs.iter().enumerate() {
        let Some(b) = bin_index(p.correction.vertical) else {
            continue;
        };
        if p.correction.horizontal.abs() > MAX_ANGLE {
            continue;
        }
        if is_hard(p.tilt, config.hard_tilt_threshold) {
            bins[b].hard.push(i);
        } else {
            bins[b].easy.push(i);
        }
    }
    for (b, s) in bins.iter().enumerate() {
        if !s.is_empty() && (s.easy.is_empty() || s.hard.is_empty()) {
            log::info!(
                "bin {b}: {} stratum empty, sampling the other one instead",
                if s.easy.is_empty() { "easy" } else { "hard" }
            );
        }
    }
    let nonempty = bins.iter().filter(|s| !s.is_empty()).count();
    if nonempty < config.bins_per_batch {
        return Err(Error::Config(format!(
            "only {nonempty} non-empty bins, {} needed per batch",
            config.bins_per_batch
        )));
    }
    Ok(SamplerIndex { bins })
}

fn draw(stratum: &[usize], quota: usize, rng: &mut impl Rng, out: &mut Vec<usize>) {
    if stratum.len() >= quota {
        out.extend(
            index::sample(rng, stratum.len(), quota)
                .into_iter()
                .map(|i| stratum[i]),
        );
    } else {
        out.extend((0..quota).map(|_| stratum[rng.gen_range(0..stratum.len())]));
    }
}

/// Pair indices of one batch: distinct non-empty bins chosen uniformly,
/// then the easy and hard quota from each.
pub fn next_batch(index: &SamplerIndex, config: &TrainConfig, rng: &mut impl Rng) -> Vec<usize> {
    let nonempty: Vec<usize> = (0..index.bins.len())
        .filter(|&b| !index.bins[b].is_empty())
        .collect();
    let chosen = index::sample(rng, nonempty.len(), config.bins_per_batch);
    let mut out = Vec::with_capacity(config.batch_size);
    for c in chosen {
        let s = &index.bins[nonempty[c]];
        let (easy, hard) = match (s.easy.is_empty(), s.hard.is_empty()) {
            (false, false) => (&s.easy, &s.hard),
            (true, _) => (&s.hard, &s.hard),
            (_, true) => (&s.easy, &s.easy),
        };
        draw(easy, config.easy_per_bin, rng, &mut out);
        draw(hard, config.hard_per_bin, rng, &mut out);
    }
    out
}

/// The generator of step `step`: independent of how many batches were drawn before.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

// ---------------------------------------------------------------------------
// losses

pub fn loss_l2<T: Real>(tape: &mut Tape<T>, output: Var, target: &Tensor<T>) -> Result<Var> {
    tape.mse(output, target)
}

pub fn loss_registration<T: Real>(
    tape: &mut Tape<T>,
    output: Var,
    target_big: &Tensor<T>,
    k: usize,
    dist: Distance,
) -> Result<Var> {
    tape.registration_loss(output, target_big, k, dist)
}

pub fn apply_loss<T: Real>(
    tape: &mut Tape<T>,
    kind: LossKind,
    k: usize,
    output: Var,
    target: &Tensor<T>,
    target_big: &Tensor<T>,
) -> Result<Var> {
    match kind {
        LossKind::L2Plain => loss_l2(tape, output, target),
        LossKind::RegistrationL2 => loss_registration(tape, output, target_big, k, Distance::L2),
        LossKind::RegistrationL1 => loss_registration(tape, output, target_big, k, Distance::L1),
    }
}

// ---------------------------------------------------------------------------
// optimizer

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }
}

/// One bias-corrected Adam update. Returns `false` (and changes nothing)
/// when any gradient is non-finite.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    config: &TrainConfig,
    learning_rate: f64,
) -> Result<bool> {
    if params.len() != grads.len() || grads.len() != state.m.len() {
        return Err(Error::Config(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        log::warn!(
            "non-finite gradient at optimizer step {}; update skipped",
            state.step
        );
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let lr = T::lit(learning_rate);
    let eps = T::lit(config.epsilon);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        if p.numel() != g.len() || m.len() != g.len() {
            return Err(Error::Config(
                "gradient length does not match its parameter".into(),
            ));
        }
        for (((w, &g), m), v) in p
            .values_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *w -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// checkpoints

const OPT_MAGIC: &[u8; 4] = b"DWOP";
const OPT_VERSION: u32 = 1;

/// Optimizer and loop state stored next to a weight file.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopState {
    pub adam: AdamState<f32>,
    pub next_step: u64,
    pub initial_loss: Option<f64>,
    pub over_count: usize,
}

impl LoopState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(OPT_MAGIC);
        out.extend_from_slice(&OPT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.next_step.to_le_bytes());
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        out.extend_from_slice(&self.initial_loss.unwrap_or(f64::NAN).to_le_bytes());
        out.extend_from_slice(&(self.over_count as u64).to_le_bytes());
        out.extend_from_slice(&(self.adam.m.len() as u32).to_le_bytes());
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            out.extend_from_slice(&(m.len() as u32).to_le_bytes());
            for x in m.iter().chain(v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = b
                .get(pos..pos + n)
                .ok_or_else(|| Error::Format("truncated optimizer state".into()))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != OPT_MAGIC {
            return Err(Error::Format("not an optimizer state file".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4"));
        if version != OPT_VERSION {
            return Err(Error::Format(format!(
                "unsupported optimizer state version {version}"
            )));
        }
        let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8"));
        let next_step = u64_at(take(8)?);
        let adam_step = u64_at(take(8)?);
        let initial = f64::from_le_bytes(take(8)?.try_into().expect("8"));
        let over_count = u64_at(take(8)?) as usize;
        let n = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
        let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let len = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
            let raw = take(len * 8)?;
            let vals: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
                .collect();
            m.push(vals[..len].to_vec());
            v.push(vals[len..].to_vec());
        }
        if pos != b.len() {
            return Err(Error::Format("trailing bytes in optimizer state".into()));
        }
        Ok(Self {
            adam: AdamState {
                step: adam_step,
                m,
                v,
            },
            next_step,
            initial_loss: if initial.is_nan() {
                None
            } else {
                Some(initial)
            },
            over_count,
        })
    }
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    weights: &ModelWeights<f32>,
    state: &LoopState,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    weights_io::save(weights, dir.join("weights.dwrp"))?;
    fs::write(dir.join("optimizer.bin"), state.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ModelWeights<f32>, LoopState)> {
    let dir = dir.as_ref();
    let weights = weights_io::load(dir.join("weights.dwrp"))?;
    let mut bytes = Vec::new();
    fs::File::open(dir.join("optimizer.bin"))?.read_to_end(&mut bytes)?;
    Ok((weights, LoopState::from_bytes(&bytes)?))
}

// ---------------------------------------------------------------------------
// loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub train_loss: f64,
    pub val_nmse: Option<f64>,
    pub wall_ms: u64,
}

/// Everything the loop reads besides the configuration.
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    pub train: Vec<PairRef>,
    pub val: Vec<PairRef>,
}

impl<'a> TrainData<'a> {
    /// Mines pairs and splits them by person per the configuration.
    pub fn split(dataset: &'a Dataset, config: &TrainConfig) -> Result<(Self, Vec<PairRef>)> {
        let pairs = data::mine_pairs(dataset, MAX_ANGLE);
        let split =
            dataset.split_by_person(config.val_persons, config.test_persons, config.seed)?;
        let train = dataset.pairs_for(&pairs, &split.train);
        let val = dataset.pairs_for(&pairs, &split.val);
        let test = dataset.pairs_for(&pairs, &split.test);
        Ok((
            Self {
                dataset,
                train,
                val,
            },
            test,
        ))
    }
}

/// Evenly strided subset of at most `n` pairs.
pub fn strided_subset(pairs: &[PairRef], n: usize) -> Vec<PairRef> {
    if pairs.len() <= n {
        return pairs.to_vec();
    }
    (0..n).map(|i| pairs[i * pairs.len() / n]).collect()
}

pub struct Trainer<'a> {
    pub model_config: ModelConfig,
    pub config: TrainConfig,
    pub weights: ModelWeights<f32>,
    pub state: LoopState,
    pub log: Vec<MetricRecord>,
    data: TrainData<'a>,
    index: SamplerIndex,
    val_subset: Vec<PairRef>,
    metrics_path: Option<PathBuf>,
    checkpoint_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model_config: &ModelConfig,
        config: &TrainConfig,
        data: TrainData<'a>,
    ) -> Result<Self> {
        let weights = ModelWeights::<f32>::init(model_config, config.seed)?;
        Self::from_parts(weights, None, config, data)
    }

    /// Continues from a checkpoint directory written by [`save_checkpoint`].
    pub fn resume(
        dir: impl AsRef<Path>,
        config: &TrainConfig,
        data: TrainData<'a>,
    ) -> Result<Self> {
        let (weights, state) = load_checkpoint(dir)?;
        Self::from_parts(weights, Some(state), config, data)
    }

    fn from_parts(
        weights: ModelWeights<f32>,
        state: Option<LoopState>,
        config: &TrainConfig,
        data: TrainData<'a>,
    ) -> Result<Self> {
        config.validate()?;
        let index = build_sampler_index(&data.train, config)?;
        let sizes: Vec<usize> = weights.params().iter().map(|t| t.numel()).collect();
        let state = state.unwrap_or_else(|| LoopState {
            adam: AdamState::new(&sizes),
            next_step: 0,
            initial_loss: None,
            over_count: 0,
        });
        if state.adam.m.iter().map(Vec::len).ne(sizes.iter().copied()) {
            return Err(Error::Format(
                "optimizer state does not match the model".into(),
            ));
        }
        let val_subset = strided_subset(&data.val, config.val_pairs);
        Ok(Self {
            model_config: weights.config.clone(),
            config: config.clone(),
            weights,
            state,
            log: Vec::new(),
            data,
            index,
            val_subset,
            metrics_path: None,
            checkpoint_dir: None,
        })
    }

    /// Appends metric records to `path` as JSON lines.
    pub fn with_metrics(mut self, path: impl Into<PathBuf>) -> Self {
        self.metrics_path = Some(path.into());
        self
    }

    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn sampler_index(&self) -> &SamplerIndex {
        &self.index
    }

    /// Pairs of step `step`, with their mirror flags.
    pub fn batch_for_step(&self, step: u64) -> Result<Vec<TrainingPair>> {
        let mut rng = step_rng(self.config.seed, step);
        let ids = next_batch(&self.index, &self.config, &mut rng);
        let flips: Vec<bool> = ids
            .iter()
            .map(|_| self.config.mirror && rng.gen_bool(0.5))
            .collect();
        ids.par_iter()
            .zip(flips.par_iter())
            .map(|(&i, &flip)| {
                let p = self.data.dataset.materialize(&self.data.train[i])?;
                Ok(if flip { p.mirrored() } else { p })
            })
            .collect()
    }

    /// Forward, loss, backward and update for one step; returns the loss.
    pub fn step_once(&mut self) -> Result<f64> {
        let step = self.state.next_step;
        let pairs = self.batch_for_step(step)?;
        let (inputs, targets, bigs) = data::stack_pairs(&pairs)?;
        let batch = Batch {
            images: inputs,
            anchors: pairs.iter().map(|p| p.input.anchors).collect(),
            angles: pairs.iter().map(|p| p.correction).collect(),
        };
        let mut tape = Tape::new();
        let fwd = self.weights.forward(&mut tape, &batch, true)?;
        let loss = apply_loss(
            &mut tape,
            self.config.loss,
            self.config.k,
            fwd.output,
            &targets,
            &bigs,
        )?;
        let value = tape.value(loss).item()? as f64;
        tape.backward(loss)?;
        let grads = collect_grads(&tape, &fwd);
        let applied = {
            let mut params = self.weights.params_mut();
            adam_step(
                &mut params,
                &grads,
                &mut self.state.adam,
                &self.config,
                self.config.learning_rate_at(step),
            )?
        };
        if applied {
            self.weights.apply_bn_stats(&fwd.bn_stats)?;
        }
        self.check_divergence(step, value)?;
        self.state.next_step += 1;
        Ok(value)
    }

    fn check_divergence(&mut self, step: u64, loss: f64) -> Result<()> {
        let initial = *self.state.initial_loss.get_or_insert(loss);
        if loss > self.config.divergence_factor * initial || !loss.is_finite() {
            self.state.over_count += 1;
            if self.state.over_count >= self.config.divergence_window {
                return Err(Error::Diverged {
                    step: step as usize,
                    loss,
                    initial,
                    window: self.config.divergence_window,
                });
            }
        } else {
            self.state.over_count = 0;
        }
        Ok(())
    }

    /// Mean nmse on the fixed validation subset.
    pub fn validate(&self) -> Result<f64> {
        let report = eval::evaluate(&self.weights, self.data.dataset, &self.val_subset, 16)?;
        Ok(report.mean_nmse())
    }

    /// Runs until `config.iterations` steps have been taken.
    pub fn run(&mut self) -> Result<()> {
        let started = Instant::now();
        let mut sink = match &self.metrics_path {
            Some(p) => Some(BufWriter::new(
                fs::OpenOptions::new().create(true).append(true).open(p)?,
            )),
            None => None,
        };
        while self.state.next_step < self.config.iterations {
            let step = self.state.next_step;
            let train_loss = self.step_once()?;
            let done = step + 1;
            let val_due = self.config.val_every > 0 && done.is_multiple_of(self.config.val_every);
            let val_nmse = if val_due && !self.val_subset.is_empty() {
                Some(self.validate()?)
            } else {
                None
            };
            let rec = MetricRecord {
                step,
                train_loss,
                val_nmse,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            if let Some(s) = sink.as_mut() {
                serde_json::to_writer(&mut *s, &rec)?;
                s.write_all(b"\n")?;
                s.flush()?;
            }
            if val_due {
                log::info!(
                    "step {done}: train loss {train_loss:.5}, val nmse {:?}",
                    val_nmse
                );
            }
            self.log.push(rec);
            if let Some(dir) = &self.checkpoint_dir {
                if self.config.checkpoint_every > 0
                    && done.is_multiple_of(self.config.checkpoint_every)
                {
                    save_checkpoint(
                        dir.join(format!("step_{done:06}")),
                        &self.weights,
                        &self.state,
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Loss of the identity resynthesis (output = input) on pairs, under `kind`.
pub fn identity_loss(pairs: &[TrainingPair], kind: LossKind, k: usize) -> Result<f64> {
    let (inputs, targets, bigs) = data::stack_pairs(pairs)?;
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(inputs);
    let l = apply_loss(&mut tape, kind, k, x, &targets, &bigs)?;
    Ok(tape.value(l).item()? as f64)
}
