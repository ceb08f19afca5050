//! Finite-difference gradient checks in double precision.
//!
//! Each suite compares analytic gradients with central differences and
//! reports the largest elementwise relative error
//! `|a - n| / max(|a|, |n|, REL_FLOOR)`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoding::{self, AnchorSet, AngleSpec};
use crate::error::{Error, Result};
use crate::layers::LayerParams;
use crate::sampler::{self, FlowField};
use crate::tape::{BnMode, Distance, Tape, Var};
use crate::tensor::Tensor;
use crate::warping_net::{self, Batch, ModelConfig, ModelWeights, Variant};

/// Central-difference step for single operations.
pub const STEP: f64 = 1e-3;
/// Step for the full model graph. Its ReLUs, L1 distances and bilinear
/// lattice make the loss piecewise smooth with many kinks, and a 1e-3 step
/// straddles some of them.
pub const GRAPH_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const GRAPH_TOLERANCE: f64 = 1e-3;
/// Magnitudes below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub type SamplerBackward =
    fn(&Tensor<f64>, &FlowField<f64>, &Tensor<f64>) -> Result<(Tensor<f64>, FlowField<f64>)>;

type CheckFn = Box<dyn Fn() -> Result<f64> + Send + Sync>;

pub struct Suite {
    pub name: &'static str,
    pub tolerance: f64,
    check: CheckFn,
}

impl Suite {
    pub fn new(
        name: &'static str,
        tolerance: f64,
        check: impl Fn() -> Result<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name,
            tolerance,
            check: Box::new(check),
        }
    }

    pub fn run(&self) -> CheckOutcome {
        let (max_rel_error, error) = match (self.check)() {
            Ok(e) => (e, None),
            Err(e) => (f64::NAN, Some(e.to_string())),
        };
        CheckOutcome {
            name: self.name,
            max_rel_error,
            tolerance: self.tolerance,
            error,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub error: Option<String>,
}

impl CheckOutcome {
    /// NaN errors fail.
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_error <= self.tolerance
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "ok" } else { "FAILED" };
        write!(
            f,
            "{:<14} max rel error {:.3e}  tolerance {:.0e}  {verdict}",
            self.name, self.max_rel_error, self.tolerance
        )?;
        if let Some(e) = &self.error {
            write!(f, "  ({e})")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(CheckOutcome::passed)
    }

    pub fn failures(&self) -> Vec<&CheckOutcome> {
        self.outcomes.iter().filter(|o| !o.passed()).collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for o in &self.outcomes {
            writeln!(f, "{o}")?;
        }
        let failed = self.failures();
        if failed.is_empty() {
            write!(f, "all {} suites passed", self.outcomes.len())
        } else {
            let names: Vec<_> = failed.iter().map(|o| o.name).collect();
            write!(
                f,
                "{} of {} suites failed: {}",
                failed.len(),
                self.outcomes.len(),
                names.join(", ")
            )
        }
    }
}

pub fn run_suites(suites: &[Suite]) -> GradcheckReport {
    GradcheckReport {
        outcomes: suites.iter().map(Suite::run).collect(),
    }
}

/// Every suite, with the real sampler backward.
pub fn default_suites(seed: u64) -> Vec<Suite> {
    vec![
        sampler_suite(seed, sampler::warp_backward::<f64>),
        Suite::new("conv", OP_TOLERANCE, move || check_conv(seed)),
        Suite::new("batchnorm", OP_TOLERANCE, move || check_batchnorm(seed)),
        Suite::new("fully_connected", OP_TOLERANCE, move || check_fc(seed)),
        Suite::new("upsample", OP_TOLERANCE, move || check_upsample(seed)),
        Suite::new("lcm_blend", OP_TOLERANCE, move || check_blend(seed)),
        Suite::new("registration", OP_TOLERANCE, move || {
            check_registration(seed)
        }),
        Suite::new("angle_embed", OP_TOLERANCE, move || check_embedding(seed)),
        Suite::new("accumulation", OP_TOLERANCE, move || check_diamond(seed)),
        Suite::new("cfw_lcm_graph", GRAPH_TOLERANCE, move || {
            check_full_graph(seed, 16)
        }),
    ]
}

/// Sampler suite against a given backward; swapping in a broken backward
/// is how the harness itself is tested.
pub fn sampler_suite(seed: u64, backward: SamplerBackward) -> Suite {
    Suite::new("sampler", OP_TOLERANCE, move || {
        check_sampler(seed, backward)
    })
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, |m, e| {
            if e.is_nan() || m.is_nan() {
                f64::NAN
            } else {
                m.max(e)
            }
        })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn central_difference(
    values: &mut [f64],
    i: usize,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<f64> {
    let x = values[i];
    values[i] = x + STEP;
    let up = f(values)?;
    values[i] = x - STEP;
    let down = f(values)?;
    values[i] = x;
    Ok((up - down) / (2.0 * STEP))
}

type Build<'a> = &'a dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn eval_graph(inputs: &[Tensor<f64>], build: Build<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.value(loss).item()
}

/// Checks every element of every input of a scalar-valued graph.
fn check_graph(inputs: Vec<Tensor<f64>>, build: Build<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();
    let mut inputs = inputs;
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        let mut numeric = Vec::with_capacity(inputs[k].numel());
        for i in 0..inputs[k].numel() {
            let mut values = inputs[k].values().to_vec();
            let d = central_difference(&mut values, i, |v| {
                inputs[k].values_mut().copy_from_slice(v);
                eval_graph(&inputs, build)
            })?;
            inputs[k].values_mut().copy_from_slice(&values);
            numeric.push(d);
        }
        let e = max_rel_error(&analytic[k], &numeric);
        worst = if e.is_nan() { e } else { worst.max(e) };
    }
    Ok(worst)
}

fn mse_against(tape: &mut Tape<f64>, out: Var, target: &Tensor<f64>) -> Result<Var> {
    tape.mse(out, target)
}

/// Sample positions keep at least 0.1 px from the pixel lattice so the
/// piecewise-bilinear loss is smooth within one step.
fn check_sampler(seed: u64, backward: SamplerBackward) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, c, h, w) = (2, 3, 6, 7);
    let image = random(&mut rng, &[b, c, h, w], 0.0, 1.0);
    let plane = h * w;
    let flow = Tensor::from_fn([b, 2, h, w], |i| {
        let p = i % plane;
        let (y, x) = ((p / w) as f64, (p % w) as f64);
        let extent = if (i / plane) % 2 == 0 { w } else { h };
        let base = rng.gen_range(0..extent - 1) as f64;
        let target = base + rng.gen_range(0.1..0.9);
        target - if (i / plane) % 2 == 0 { x } else { y }
    });
    let weights = random(&mut rng, &[b, c, h, w], -1.0, 1.0);
    let loss = |img: &Tensor<f64>, fl: &Tensor<f64>| -> Result<f64> {
        let out = sampler::warp(img, &FlowField::new(fl.clone())?)?;
        Ok(out
            .values()
            .iter()
            .zip(weights.values())
            .map(|(a, r)| a * r)
            .sum())
    };
    let (gi, gf) = backward(&image, &FlowField::new(flow.clone())?, &weights)?;
    let mut image_v = image.values().to_vec();
    let mut numeric_i = Vec::with_capacity(image_v.len());
    for i in 0..image_v.len() {
        numeric_i.push(central_difference(&mut image_v, i, |v| {
            loss(&Tensor::new(image.shape().to_vec(), v.to_vec())?, &flow)
        })?);
    }
    let mut flow_v = flow.values().to_vec();
    let mut numeric_f = Vec::with_capacity(flow_v.len());
    for i in 0..flow_v.len() {
        numeric_f.push(central_difference(&mut flow_v, i, |v| {
            loss(&image, &Tensor::new(flow.shape().to_vec(), v.to_vec())?)
        })?);
    }
    Ok(max_rel_error(gi.values(), &numeric_i).max(max_rel_error(gf.tensor().values(), &numeric_f)))
}

fn check_conv(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11);
    let mut worst = 0.0f64;
    for kernel in [5, 3] {
        let x = random(&mut rng, &[2, 3, 6, 7], -1.0, 1.0);
        let wt = random(&mut rng, &[4, 3, kernel, kernel], -0.5, 0.5);
        let bias = random(&mut rng, &[4], -0.5, 0.5);
        let target = random(&mut rng, &[2, 4, 6, 7], -1.0, 1.0);
        let e = check_graph(vec![x, wt, bias], &|t, v| {
            let y = t.conv2d_same(v[0], v[1], v[2])?;
            mse_against(t, y, &target)
        })?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn check_batchnorm(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x22);
    let x = random(&mut rng, &[3, 4, 5, 6], -1.0, 2.0);
    let gamma = random(&mut rng, &[4], 0.5, 1.5);
    let beta = random(&mut rng, &[4], -0.5, 0.5);
    let target = random(&mut rng, &[3, 4, 5, 6], -1.0, 1.0);
    let train = check_graph(vec![x.clone(), gamma.clone(), beta.clone()], &|t, v| {
        let (y, _) = t.batchnorm(v[0], v[1], v[2], 1e-5, BnMode::Train)?;
        mse_against(t, y, &target)
    })?;
    let mean = random(&mut rng, &[4], -0.2, 0.2).into_values();
    let var = random(&mut rng, &[4], 0.5, 2.0).into_values();
    let infer = check_graph(vec![x, gamma, beta], &|t, v| {
        let mode = BnMode::Infer {
            running_mean: &mean,
            running_var: &var,
        };
        let (y, _) = t.batchnorm(v[0], v[1], v[2], 1e-5, mode)?;
        mse_against(t, y, &target)
    })?;
    Ok(train.max(infer))
}

fn check_fc(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x33);
    let x = random(&mut rng, &[3, 5], -1.0, 1.0);
    let wt = random(&mut rng, &[5, 4], -1.0, 1.0);
    let bias = random(&mut rng, &[4], -1.0, 1.0);
    let target = random(&mut rng, &[3, 4], -1.0, 1.0);
    check_graph(vec![x, wt, bias], &|t, v| {
        let y = t.fully_connected(v[0], v[1], v[2])?;
        mse_against(t, y, &target)
    })
}

/// The half-scale flow path: 2x upsampling, edge resize to an odd extent,
/// doubling of displacements.
fn check_upsample(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x44);
    let flow = random(&mut rng, &[2, 2, 5, 6], -1.0, 1.0);
    let target = random(&mut rng, &[2, 2, 9, 11], -1.0, 1.0);
    let plain = random(&mut rng, &[1, 3, 4, 3], -1.0, 1.0);
    let plain_target = random(&mut rng, &[1, 3, 8, 6], -1.0, 1.0);
    let a = check_graph(vec![flow], &|t, v| {
        let y = warping_net::upsample_flow(t, v[0], 9, 11)?;
        mse_against(t, y, &target)
    })?;
    let b = check_graph(vec![plain], &|t, v| {
        let y = t.upsample2x(v[0])?;
        mse_against(t, y, &plain_target)
    })?;
    Ok(a.max(b))
}

fn check_blend(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    let image = random(&mut rng, &[2, 3, 5, 6], 0.0, 1.0);
    let mask = random(&mut rng, &[2, 1, 5, 6], 0.05, 0.95);
    let target = random(&mut rng, &[2, 3, 5, 6], 0.0, 1.0);
    check_graph(vec![image, mask], &|t, v| {
        let y = crate::lcm::apply_lightness(t, v[0], v[1])?;
        mse_against(t, y, &target)
    })
}

/// Outputs sit at 0.05..0.2 from one chosen window of the target, so that
/// window wins by a wide margin and no difference is near the kink of `|d|`.
fn check_registration(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x66);
    let k = 3;
    let (h, w) = (5, 6);
    let (th, tw) = (h + 2 * k, w + 2 * k);
    let big = random(&mut rng, &[2, 3, th, tw], 0.0, 1.0);
    let offsets: Vec<(usize, usize)> = (0..2)
        .map(|_| (rng.gen_range(0..=2 * k), rng.gen_range(0..=2 * k)))
        .collect();
    let out = Tensor::from_fn([2, 3, h, w], |i| {
        let (n, c, y, x) = (i / (3 * h * w), (i / (h * w)) % 3, (i / w) % h, i % w);
        let (dy, dx) = offsets[n];
        let t = big.values()[((n * 3 + c) * th + y + dy) * tw + x + dx];
        let u: f64 = rng.gen_range(0.05..0.2);
        if rng.gen_bool(0.5) {
            t + u
        } else {
            t - u
        }
    });
    let mut worst = 0.0f64;
    for dist in [Distance::L2, Distance::L1] {
        let e = check_graph(vec![out.clone()], &|t, v| {
            t.registration_loss(v[0], &big, k, dist)
        })?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn check_embedding(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let first = LayerParams::<f64>::fc_init(1, encoding::EMBED_DIM, &mut rng)?;
    let second = LayerParams::<f64>::fc_init(encoding::EMBED_DIM, encoding::EMBED_DIM, &mut rng)?;
    let angles = random(&mut rng, &[3, 1], -25.0, 25.0);
    let target = random(&mut rng, &[3, encoding::EMBED_DIM], 0.0, 1.0);
    check_graph(vec![angles], &|t, v| {
        let a = first.register(t);
        let b = second.register(t);
        let e = encoding::embed_angle(t, v[0], [(&first, a), (&second, b)])?;
        mse_against(t, e, &target)
    })
}

/// A tensor consumed twice must receive both contributions.
fn check_diamond(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x88);
    let x = random(&mut rng, &[2, 3], -2.0, 2.0);
    let target = random(&mut rng, &[2, 3], -1.0, 1.0);
    check_graph(vec![x], &|t, v| {
        let left = t.scale(v[0], 1.5)?;
        let right = t.sigmoid(v[0])?;
        let joined = t.add(left, right)?;
        mse_against(t, joined, &target)
    })
}

/// Toy CFW+LCM configuration at 9x11 with the default layer widths.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        variant: Variant::CfwLcm,
        height: 9,
        width: 11,
        ..ModelConfig::default()
    }
}

pub fn toy_batch(rng: &mut impl Rng, items: usize) -> Result<Batch<f64>> {
    let (h, w) = (9, 11);
    let images = Tensor::from_fn([items, 3, h, w], |_| rng.gen_range(0.05..0.95));
    let mut anchors = Vec::with_capacity(items);
    let mut angles = Vec::with_capacity(items);
    for _ in 0..items {
        let jx = rng.gen_range(-0.4f32..0.4);
        let jy = rng.gen_range(-0.4f32..0.4);
        let pts = [
            [0.5, 4.0],
            [2.5, 2.0],
            [7.0, 2.0],
            [10.0, 4.5],
            [7.5, 6.5],
            [3.0, 6.5],
            [5.0, 4.0],
        ];
        anchors.push(AnchorSet::new(
            pts.map(|[x, y]: [f32; 2]| [x + jx, y + jy]),
        )?);
        angles.push(AngleSpec::vertical(rng.gen_range(-25.0..25.0)));
    }
    Ok(Batch {
        images,
        anchors,
        angles,
    })
}

fn graph_loss(
    weights: &ModelWeights<f64>,
    batch: &Batch<f64>,
    big: &Tensor<f64>,
) -> Result<(Tape<f64>, Var, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let fwd = weights.forward(&mut tape, batch, true)?;
    let loss = tape.registration_loss(fwd.output, big, 3, Distance::L1)?;
    tape.backward(loss)?;
    let grads = warping_net::collect_grads(&tape, &fwd);
    Ok((tape, loss, grads))
}

/// Full training graph (training-mode batchnorm, registration loss) on a
/// random subset of `count` parameters.
pub fn check_full_graph(seed: u64, count: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x99);
    let weights = ModelWeights::<f64>::init(&toy_config(), seed)?;
    let batch = toy_batch(&mut rng, 2)?;
    let big = Tensor::from_fn([2, 3, 15, 17], |_| rng.gen_range(0.0..1.0));
    let (_, _, grads) = graph_loss(&weights, &batch, &big)?;
    let sizes: Vec<usize> = grads.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Config("model has no parameters".into()));
    }
    let loss_of = |w: &ModelWeights<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let fwd = w.forward(&mut tape, &batch, true)?;
        let loss = tape.registration_loss(fwd.output, &big, 3, Distance::L1)?;
        tape.value(loss).item()
    };
    let mut analytic = Vec::with_capacity(count);
    let mut numeric = Vec::with_capacity(count);
    let mut probe = weights.clone();
    for _ in 0..count {
        let mut flat = rng.gen_range(0..total);
        let mut p = 0;
        while flat >= sizes[p] {
            flat -= sizes[p];
            p += 1;
        }
        analytic.push(grads[p][flat]);
        let original = weights.params()[p].values()[flat];
        let mut at = |x: f64| -> Result<f64> {
            probe.params_mut()[p].values_mut()[flat] = x;
            loss_of(&probe)
        };
        let d = (at(original + GRAPH_STEP)? - at(original - GRAPH_STEP)?) / (2.0 * GRAPH_STEP);
        probe.params_mut()[p].values_mut()[flat] = original;
        numeric.push(d);
    }
    Ok(max_rel_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corrupted_backward(
        image: &Tensor<f64>,
        flow: &FlowField<f64>,
        upstream: &Tensor<f64>,
    ) -> Result<(Tensor<f64>, FlowField<f64>)> {
        let (gi, gf) = sampler::warp_backward(image, flow, upstream)?;
        let bent = gf.tensor().map(|v| v * 1.01);
        Ok((gi, FlowField::new(bent)?))
    }

    #[test]
    fn every_suite_passes_across_seeds() {
        for seed in 0..12 {
            let report = run_suites(&default_suites(seed));
            assert!(report.passed(), "seed {seed}\n{report}");
        }
    }

    #[test]
    fn corrupted_sampler_is_caught_by_name() {
        let report = run_suites(&[sampler_suite(3, corrupted_backward)]);
        let failed = report.failures();
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].name, "sampler");
        assert!(report.to_string().contains("sampler"));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_error(2.0, 1.0), 0.5);
        assert!(rel_error(1e-9, 0.0) < 1e-2);
        assert!(!CheckOutcome {
            name: "x",
            max_rel_error: f64::NAN,
            tolerance: 1.0,
            error: None
        }
        .passed());
    }
}
