//! Normalized-MSE evaluation: per-pair records, sorted error curves,
//! per-angle distributions, CSV and PNG output.
//!
//! `nmse = mse(model output, target) / mse(input, target)`, so 1.0 means
//! "no better than returning the input". The ratio is not invariant to a
//! brightness rescale of the images; compare models only on the same data.

use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PairRef};
use crate::encoding::AngleSpec;
use crate::error::{Error, Result};
use crate::training::{bin_index, bin_range, NUM_BINS};
use crate::warping_net::{Batch, ModelWeights, Variant};
use crate::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pair_id: usize,
    pub correction: AngleSpec,
    pub mse_model: f64,
    pub mse_input: f64,
    pub nmse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub variant: Variant,
    pub records: Vec<EvalRecord>,
    /// Pairs skipped because the input already equals the target.
    pub excluded: Vec<usize>,
}

/// Mean squared difference of item `item` of two equally shaped batches.
fn item_mse(a: &Tensor<f32>, b: &Tensor<f32>, item: usize, per_item: usize) -> f64 {
    let (x, y) = (
        &a.values()[item * per_item..(item + 1) * per_item],
        &b.values()[item * per_item..(item + 1) * per_item],
    );
    x.iter()
        .zip(y)
        .map(|(p, q)| ((p - q) as f64).powi(2))
        .sum::<f64>()
        / per_item as f64
}

/// Fails if any pair comes from a person in `train_persons`.
pub fn check_disjoint(dataset: &Dataset, pairs: &[PairRef], train_persons: &[usize]) -> Result<()> {
    match pairs
        .iter()
        .find(|p| train_persons.contains(&dataset.sequences[p.sequence].person))
    {
        Some(p) => Err(Error::Eval(format!(
            "test pair from training person {}",
            dataset.sequences[p.sequence].person
        ))),
        None => Ok(()),
    }
}

/// Runs the model in inference mode on every pair. `pair_id` is the index
/// into `pairs`.
pub fn evaluate(
    weights: &ModelWeights<f32>,
    dataset: &Dataset,
    pairs: &[PairRef],
    batch_size: usize,
) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(pairs.len());
    let mut excluded = Vec::new();
    let ids: Vec<usize> = (0..pairs.len()).collect();
    for chunk in ids.chunks(batch_size.max(1)) {
        let items = chunk
            .iter()
            .map(|&i| dataset.materialize(&pairs[i]))
            .collect::<Result<Vec<_>>>()?;
        let (inputs, targets, _) = crate::data::stack_pairs(&items)?;
        let batch = Batch {
            images: inputs.clone(),
            anchors: items.iter().map(|p| p.input.anchors).collect(),
            angles: items.iter().map(|p| p.correction).collect(),
        };
        let pred = weights.predict(&batch)?;
        let per_item = inputs.numel() / chunk.len();
        for (n, &id) in chunk.iter().enumerate() {
            let mse_input = item_mse(&inputs, &targets, n, per_item);
            if mse_input == 0.0 {
                log::info!("pair {id}: input equals target, excluded from evaluation");
                excluded.push(id);
                continue;
            }
            let mse_model = item_mse(&pred.output, &targets, n, per_item);
            records.push(EvalRecord {
                pair_id: id,
                correction: pairs[id].correction,
                mse_model,
                mse_input,
                nmse: mse_model / mse_input,
            });
        }
    }
    Ok(EvalReport {
        variant: weights.config.variant,
        records,
        excluded,
    })
}

impl EvalReport {
    pub fn mean_nmse(&self) -> f64 {
        if self.records.is_empty() {
            return f64::NAN;
        }
        self.records.iter().map(|r| r.nmse).sum::<f64>() / self.records.len() as f64
    }

    pub fn pair_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.records.iter().map(|r| r.pair_id).collect();
        ids.sort_unstable();
        ids
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "pair_id,v_angle,h_angle,mse_model,mse_input,nmse")?;
        for r in &self.records {
            writeln!(
                f,
                "{},{},{},{:e},{:e},{}",
                r.pair_id,
                r.correction.vertical,
                r.correction.horizontal,
                r.mse_model,
                r.mse_input,
                r.nmse
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// `(rank, nmse)` in ascending nmse order.
pub fn sorted_error_curve(report: &EvalReport) -> Vec<(usize, f64)> {
    let mut v: Vec<f64> = report.records.iter().map(|r| r.nmse).collect();
    v.sort_by(f64::total_cmp);
    v.into_iter().enumerate().collect()
}

/// Sorted curves of several reports, which must cover identical pairs.
pub fn comparable_curves(reports: &[&EvalReport]) -> Result<Vec<Vec<(usize, f64)>>> {
    if let Some(first) = reports.first() {
        let ids = first.pair_ids();
        for r in &reports[1..] {
            if r.pair_ids() != ids {
                return Err(Error::Eval(format!(
                    "{} and {} were evaluated on different pairs",
                    first.variant, r.variant
                )));
            }
        }
    }
    Ok(reports.iter().map(|r| sorted_error_curve(r)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinStats {
    pub bin: usize,
    pub lo: f32,
    pub hi: f32,
    pub count: usize,
    pub mean: f64,
    pub q1: f64,
    pub q3: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

fn stats(bin: usize, mut v: Vec<f64>) -> BinStats {
    v.sort_by(f64::total_cmp);
    let (lo, hi) = bin_range(bin);
    BinStats {
        bin,
        lo,
        hi,
        count: v.len(),
        mean: v.iter().sum::<f64>() / v.len() as f64,
        q1: quantile(&v, 0.25),
        q3: quantile(&v, 0.75),
    }
}

/// Mean and interquartile range of nmse per vertical correction bin, using
/// the training bin layout. Empty bins are omitted.
pub fn angle_error_distribution(report: &EvalReport) -> Vec<BinStats> {
    let mut bins = vec![Vec::new(); NUM_BINS];
    for r in &report.records {
        if let Some(b) = bin_index(r.correction.vertical) {
            bins[b].push(r.nmse);
        }
    }
    bins.into_iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(i, v)| stats(i, v))
        .collect()
}

/// Mean nmse per |correction| bucket: the central bin, then each pair of
/// bins symmetric about zero. Returns `(bucket, count, mean)` for non-empty
/// buckets in order of increasing magnitude.
pub fn abs_angle_buckets(report: &EvalReport) -> Vec<(usize, usize, f64)> {
    let mid = NUM_BINS / 2;
    let mut sums = vec![(0usize, 0f64); mid + 1];
    for r in &report.records {
        if let Some(b) = bin_index(r.correction.vertical) {
            let bucket = b.abs_diff(mid);
            sums[bucket].0 += 1;
            sums[bucket].1 += r.nmse;
        }
    }
    sums.into_iter()
        .enumerate()
        .filter(|(_, (n, _))| *n > 0)
        .map(|(i, (n, s))| (i, n, s / n as f64))
        .collect()
}

// ---------------------------------------------------------------------------
// plots

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Line plot of several series on shared axes with light grid lines. The
/// x axis spans each series' own index range; y is `[0, y_max]`.
pub fn plot_series(series: &[Vec<f64>], y_max: f64, width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (l, r, t, b) = (30i64, width as i64 - 10, 10i64, height as i64 - 25);
    for k in 0..=4 {
        let y = b - (b - t) * k / 4;
        draw_line(&mut img, (l, y), (r, y), [225, 225, 225]);
    }
    draw_line(&mut img, (l, t), (l, b), [0, 0, 0]);
    draw_line(&mut img, (l, b), (r, b), [0, 0, 0]);
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let n = s.len().max(2) - 1;
        let pt = |i: usize, v: f64| {
            let x = l + (r - l) * i as i64 / n as i64;
            let y = b - ((v / y_max).clamp(0.0, 1.0) * (b - t) as f64).round() as i64;
            (x, y)
        };
        for i in 1..s.len() {
            draw_line(&mut img, pt(i - 1, s[i - 1]), pt(i, s[i]), color);
        }
        // legend swatch
        let ly = t + 6 * si as i64;
        draw_line(&mut img, (r - 30, ly), (r - 10, ly), color);
    }
    img
}

/// Writes the sorted nmse curves of `reports` as one PNG.
pub fn plot_sorted_curves(reports: &[&EvalReport], path: impl AsRef<Path>) -> Result<()> {
    let curves = comparable_curves(reports)?;
    let series: Vec<Vec<f64>> = curves
        .iter()
        .map(|c| c.iter().map(|p| p.1).collect())
        .collect();
    let y_max = series
        .iter()
        .flatten()
        .copied()
        .fold(1.0f64, f64::max)
        .min(3.0);
    Ok(plot_series(&series, y_max, 480, 320).save(path)?)
}

/// Writes per-bin mean nmse of `reports` over the 15 correction bins.
pub fn plot_angle_distribution(reports: &[&EvalReport], path: impl AsRef<Path>) -> Result<()> {
    let series: Vec<Vec<f64>> = reports
        .iter()
        .map(|r| {
            let mut v = vec![0.0; NUM_BINS];
            for s in angle_error_distribution(r) {
                v[s.bin] = s.mean;
            }
            v
        })
        .collect();
    let y_max = series
        .iter()
        .flatten()
        .copied()
        .fold(1.0f64, f64::max)
        .min(3.0);
    Ok(plot_series(&series, y_max, 480, 320).save(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{mine_pairs, synth_generate, SynthConfig};
    use crate::warping_net::ModelConfig;

    fn report(values: &[(f32, f64)]) -> EvalReport {
        EvalReport {
            variant: Variant::CFW,
            records: values
                .iter()
                .enumerate()
                .map(|(i, &(a, n))| EvalRecord {
                    pair_id: i,
                    correction: AngleSpec::vertical(a),
                    mse_model: n,
                    mse_input: 1.0,
                    nmse: n,
                })
                .collect(),
            excluded: vec![],
        }
    }

    #[test]
    fn zero_model_scores_one() {
        let cfg = SynthConfig {
            persons: 1,
            sequences_per_person: 1,
            frames_per_sequence: 4,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg, 1).unwrap();
        let pairs = mine_pairs(&ds, 30.0);
        let mcfg = ModelConfig {
            variant: Variant::CFW,
            tower_channels: vec![4, 4, 4, 4, 2],
            ..ModelConfig::default()
        };
        let mut w = ModelWeights::<f32>::init(&mcfg, 0).unwrap();
        w.coarse.as_mut().unwrap().zero_convs();
        w.fine.zero_convs();
        let r = evaluate(&w, &ds, &pairs, 5).unwrap();
        assert_eq!(r.records.len() + r.excluded.len(), pairs.len());
        assert!(r.records.iter().all(|x| x.nmse == 1.0));
        assert_eq!(
            r.records.iter().map(|x| x.pair_id).collect::<Vec<_>>(),
            (0..pairs.len())
                .filter(|i| !r.excluded.contains(i))
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn curves_are_sorted_and_flat_for_constants() {
        let r = report(&[(1.0, 0.5), (3.0, 0.2), (-9.0, 0.9)]);
        let c = sorted_error_curve(&r);
        assert_eq!(c, vec![(0, 0.2), (1, 0.5), (2, 0.9)]);
        let flat = sorted_error_curve(&report(&[(0.0, 0.4), (1.0, 0.4)]));
        assert!(flat.iter().all(|p| p.1 == 0.4));
    }

    #[test]
    fn curves_need_identical_pairs() {
        let a = report(&[(1.0, 0.5), (3.0, 0.2)]);
        let mut b = report(&[(1.0, 0.5), (3.0, 0.2)]);
        assert!(comparable_curves(&[&a, &b]).is_ok());
        b.records[1].pair_id = 7;
        assert!(matches!(comparable_curves(&[&a, &b]), Err(Error::Eval(_))));
    }

    #[test]
    fn bin_stats() {
        let one = angle_error_distribution(&report(&[(1.0, 0.5), (0.5, 0.1)]));
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].bin, 7);
        assert!((one[0].mean - 0.3).abs() < 1e-12);
        let r = report(&[
            (-30.0, 1.0),
            (30.0, 2.0),
            (29.0, 3.0),
            (0.0, 0.0),
            (-13.0, 0.5),
        ]);
        let d = angle_error_distribution(&r);
        assert_eq!(d.iter().map(|s| s.count).sum::<usize>(), 5);
        assert_eq!(d.last().unwrap().bin, 14);
        assert_eq!(d.last().unwrap().count, 2);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.25), 2.0);
        let buckets = abs_angle_buckets(&r);
        assert_eq!(buckets.first().unwrap().0, 0);
        assert_eq!(buckets.last().unwrap(), &(7, 3, 2.0));
    }

    #[test]
    fn csv_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        report(&[(1.5, 0.25)]).write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "pair_id,v_angle,h_angle,mse_model,mse_input,nmse"
        );
        assert!(lines.next().unwrap().starts_with("0,1.5,0,"));
    }

    #[test]
    fn plots_render() {
        let dir = tempfile::tempdir().unwrap();
        let a = report(&[(1.0, 0.5), (3.0, 0.2)]);
        plot_sorted_curves(&[&a, &a], dir.path().join("c.png")).unwrap();
        plot_angle_distribution(&[&a], dir.path().join("d.png")).unwrap();
        let img = image::open(dir.path().join("c.png")).unwrap();
        assert_eq!((img.width(), img.height()), (480, 320));
    }
}
