//! Trains the single-scale, coarse-to-fine and lightness-corrected variants
//! under one budget and compares them on the same held-out pairs. Writes
//! per-variant CSVs and the two comparison plots.
//!
//! cargo run --release --example evaluate_ablation -- [steps] [out_dir]

use warpnet::data::{synth_generate, SynthConfig};
use warpnet::eval;
use warpnet::training::{strided_subset, LrSchedule, TrainConfig, TrainData, Trainer};
use warpnet::warping_net::{ModelConfig, Variant};

fn main() -> warpnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let out = args
        .next()
        .map_or_else(|| std::env::temp_dir().join("warpnet_ablation"), Into::into);
    std::fs::create_dir_all(&out)?;

    let ds = synth_generate(&SynthConfig::default(), 1)?;
    let train = TrainConfig {
        batch_size: 16,
        bins_per_batch: 2,
        easy_per_bin: 6,
        hard_per_bin: 2,
        iterations: steps,
        lr_schedule: LrSchedule::Cosine,
        val_every: 0,
        ..TrainConfig::default()
    };
    let mut reports = Vec::new();
    for variant in [Variant::SS, Variant::CFW, Variant::CfwLcm] {
        let model = ModelConfig {
            variant,
            tower_channels: vec![16, 32, 16, 8, 2],
            first_kernel: 3,
            ..ModelConfig::default()
        };
        let (split, test) = TrainData::split(&ds, &train)?;
        let mut trainer = Trainer::new(&model, &train, split)?;
        trainer.run()?;
        let report = eval::evaluate(&trainer.weights, &ds, &strided_subset(&test, 400), 32)?;
        report.write_csv(out.join(format!("{variant}.csv")))?;
        println!("{variant:>8}: mean nmse {:.4}", report.mean_nmse());
        reports.push(report);
    }
    let refs: Vec<_> = reports.iter().collect();
    eval::plot_sorted_curves(&refs, out.join("sorted_errors.png"))?;
    eval::plot_angle_distribution(&refs, out.join("angle_errors.png"))?;
    for stats in eval::angle_error_distribution(&reports[2]) {
        println!("{stats:?}");
    }
    println!("csv and plots in {}", out.display());
    Ok(())
}
