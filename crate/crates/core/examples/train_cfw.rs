//! Trains a reduced coarse-to-fine model on a fresh synthetic set and
//! reports held-out error.
//!
//! cargo run --release --example train_cfw -- [steps] [out_dir]

use warpnet::data::{synth_generate, SynthConfig};
use warpnet::eval;
use warpnet::training::{strided_subset, LrSchedule, TrainConfig, TrainData, Trainer};
use warpnet::warping_net::{ModelConfig, Variant};
use warpnet::weights_io;

fn main() -> warpnet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let out = args.next().map_or_else(std::env::temp_dir, Into::into);

    let ds = synth_generate(&SynthConfig::default(), 1)?;
    let model = ModelConfig {
        variant: Variant::CFW,
        tower_channels: vec![16, 32, 16, 8, 2],
        first_kernel: 3,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        batch_size: 16,
        bins_per_batch: 2,
        easy_per_bin: 6,
        hard_per_bin: 2,
        iterations: steps,
        lr_schedule: LrSchedule::Cosine,
        val_every: 100,
        val_pairs: 64,
        ..TrainConfig::default()
    };
    let (split, test) = TrainData::split(&ds, &train)?;
    let mut trainer =
        Trainer::new(&model, &train, split)?.with_metrics(out.join("train_cfw.jsonl"));
    trainer.run()?;

    let path = out.join("train_cfw.dwrp");
    weights_io::save(&trainer.weights, &path)?;
    let report = eval::evaluate(&trainer.weights, &ds, &strided_subset(&test, 400), 32)?;
    println!(
        "test nmse {:.4} over {} pairs; weights in {}",
        report.mean_nmse(),
        report.records.len(),
        path.display()
    );
    for (bucket, n, mean) in eval::abs_angle_buckets(&report) {
        println!("  |angle| bucket {bucket}: {mean:.3} ({n} pairs)");
    }
    Ok(())
}
