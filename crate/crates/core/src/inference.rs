//! Single-image redirection, angle sweeps and throughput measurement.

use std::fs;
use std::path::Path;
use std::time::Instant;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_crop, CropBox};
use crate::encoding::{AnchorSet, AngleSpec, NUM_ANCHORS};
use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;
use crate::warping_net::{Batch, ModelWeights, Prediction};

/// Anchor sidecar file: `{"anchors": [[x, y], ...]}` with seven points in
/// image pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSidecar {
    pub anchors: Vec<[f32; 2]>,
}

impl AnchorSidecar {
    pub fn load(path: impl AsRef<Path>) -> Result<AnchorSet> {
        let s: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        let points: [[f32; 2]; NUM_ANCHORS] = s.anchors.try_into().map_err(|v: Vec<_>| {
            Error::Config(format!(
                "anchor sidecar has {} points, expected {NUM_ANCHORS}",
                v.len()
            ))
        })?;
        AnchorSet::new(points)
    }
}

/// Model-sized input crop and its anchors. Images already at the model's
/// crop size are taken as they are; larger ones are cropped around the
/// anchors.
pub fn prepare_input(
    weights: &ModelWeights<f32>,
    image: &RgbImage,
    anchors: &AnchorSet,
) -> Result<(Tensor<f32>, AnchorSet)> {
    let (h, w) = (weights.config.height, weights.config.width);
    if image.dimensions() == (w as u32, h as u32) {
        return Ok((imageio::rgb_to_tensor(image), *anchors));
    }
    let bx = CropBox::from_anchors(anchors)?;
    let crop = sample_crop(image, &bx, h, w, 0);
    let points = anchors.points.map(|p| bx.map_point(p, w, h));
    Ok((crop, AnchorSet::new(points)?))
}

pub fn redirect(
    weights: &ModelWeights<f32>,
    crop: &Tensor<f32>,
    anchors: &AnchorSet,
    angle: AngleSpec,
) -> Result<Prediction<f32>> {
    weights.predict(&Batch::single(crop.clone(), *anchors, angle)?)
}

/// `steps` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f32, hi: f32, steps: usize) -> Vec<f32> {
    match steps {
        0 => Vec::new(),
        1 => vec![lo],
        n => (0..n)
            .map(|i| lo + (hi - lo) * i as f32 / (n - 1) as f32)
            .collect(),
    }
}

/// Redirected outputs at each vertical angle side by side, and the input
/// centered in a second row. The strip is `angles.len()` crops wide.
pub fn sweep(
    weights: &ModelWeights<f32>,
    crop: &Tensor<f32>,
    anchors: &AnchorSet,
    angles: &[f32],
    horizontal: f32,
) -> Result<RgbImage> {
    if angles.is_empty() {
        return Err(Error::Config("a sweep needs at least one angle".into()));
    }
    if angles.iter().any(|a| a.abs() > crate::encoding::MAX_ANGLE) {
        log::warn!("sweep reaches beyond the trained range; outputs there are extrapolations");
    }
    let batch = Batch {
        images: Tensor::stack(&vec![crop.clone(); angles.len()])?,
        anchors: vec![*anchors; angles.len()],
        angles: angles
            .iter()
            .map(|&v| AngleSpec {
                vertical: v,
                horizontal,
            })
            .collect(),
    };
    let pred = weights.predict(&batch)?;
    let outputs = (0..angles.len())
        .map(|i| imageio::tensor_to_rgb(&pred.output, i))
        .collect::<Result<Vec<_>>>()?;
    let input = imageio::tensor_to_rgb(crop, 0)?;
    let (w, h) = input.dimensions();
    let mut second = vec![RgbImage::new(w, h); angles.len()];
    second[angles.len() / 2] = input;
    imageio::tile(&[outputs, second])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub batch: usize,
    pub iterations: usize,
    /// Per-image latency.
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub images_per_sec: f64,
}

/// Times inference-mode forward passes on random crops, after one warm-up pass.
pub fn bench(
    weights: &ModelWeights<f32>,
    batch: usize,
    iterations: usize,
    seed: u64,
) -> Result<BenchReport> {
    if batch == 0 || iterations == 0 {
        return Err(Error::Config(
            "bench needs a positive batch and iteration count".into(),
        ));
    }
    let (h, w) = (weights.config.height, weights.config.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = AnchorSet::new([
        [0.1 * w as f32, 0.5 * h as f32],
        [0.3 * w as f32, 0.3 * h as f32],
        [0.7 * w as f32, 0.3 * h as f32],
        [0.9 * w as f32, 0.5 * h as f32],
        [0.7 * w as f32, 0.7 * h as f32],
        [0.3 * w as f32, 0.7 * h as f32],
        [0.5 * w as f32, 0.5 * h as f32],
    ])?;
    let input = Batch {
        images: Tensor::from_fn([batch, 3, h, w], |_| rng.gen_range(0.0..1.0)),
        anchors: vec![anchors; batch],
        angles: (0..batch)
            .map(|_| AngleSpec::vertical(rng.gen_range(-15.0..15.0)))
            .collect(),
    };
    weights.predict(&input)?;
    let mut per_image = Vec::with_capacity(iterations);
    let started = Instant::now();
    for _ in 0..iterations {
        let t = Instant::now();
        weights.predict(&input)?;
        per_image.push(t.elapsed().as_secs_f64() * 1e3 / batch as f64);
    }
    let total = started.elapsed().as_secs_f64();
    let mean_ms = per_image.iter().sum::<f64>() / iterations as f64;
    per_image.sort_by(f64::total_cmp);
    let p95_ms = per_image[((iterations as f64 * 0.95).ceil() as usize).clamp(1, iterations) - 1];
    Ok(BenchReport {
        batch,
        iterations,
        mean_ms,
        p95_ms,
        images_per_sec: (batch * iterations) as f64 / total,
    })
}
