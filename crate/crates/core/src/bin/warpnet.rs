use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use warpnet::config::ExperimentConfig;
use warpnet::data::{synth_generate, Dataset};
use warpnet::encoding::AngleSpec;
use warpnet::error::{Error, Result};
use warpnet::inference::{self, AnchorSidecar};
use warpnet::training::{TrainData, Trainer};
use warpnet::warping_net::ModelWeights;
use warpnet::{eval, gradcheck, imageio, lcm, weights_io};

#[derive(Parser)]
#[command(
    name = "warpnet",
    version,
    about = "Gaze redirection by learned image warping"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON with model, train and synth sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data synthesis and training; overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Configuration overrides such as `train.iterations=500`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn seed(&self, cfg: &ExperimentConfig) -> u64 {
        self.seed.unwrap_or(cfg.train.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic eye dataset.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes weights, metrics and the resolved configuration.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; a fresh synthetic set is rendered when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Caps the iteration count.
        #[arg(long)]
        steps: Option<u64>,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate weights on the held-out persons; writes CSV and plots.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Redirect one eye image.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// JSON sidecar with seven anchor points.
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long, allow_negative_numbers = true, default_value_t = 0.0)]
        angle_v: f32,
        #[arg(long, allow_negative_numbers = true, default_value_t = 0.0)]
        angle_h: f32,
        #[arg(long)]
        out: PathBuf,
        /// Also write the lightness mask as a grayscale PNG.
        #[arg(long)]
        dump_mask: Option<PathBuf>,
    },
    /// Render a strip of redirections over a range of vertical angles.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long, allow_negative_numbers = true, default_value_t = -15.0)]
        angle_min: f32,
        #[arg(long, allow_negative_numbers = true, default_value_t = 15.0)]
        angle_max: f32,
        #[arg(long, allow_negative_numbers = true, default_value_t = 0.0)]
        angle_h: f32,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Measure inference throughput.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Weights to time; freshly initialized ones otherwise.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,16")]
        batch: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        iterations: usize,
    },
}

fn load_or_synth(data: Option<&Path>, cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    match data {
        Some(p) => Dataset::load(p),
        None => synth_generate(&cfg.synth, seed),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { common, out } => {
            let cfg = common.resolve()?;
            let ds = synth_generate(&cfg.synth, common.seed(&cfg))?;
            ds.save(&out)?;
            println!(
                "wrote {} sequences, {} frames to {}",
                ds.sequences.len(),
                ds.num_frames(),
                out.display()
            );
        }
        Command::Train {
            common,
            data,
            out,
            steps,
            resume,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(s) = steps {
                cfg.train.iterations = cfg.train.iterations.min(s);
            }
            let ds = load_or_synth(data.as_deref(), &cfg, common.seed(&cfg))?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.json"), cfg.to_json()?)?;
            let (split, test) = TrainData::split(&ds, &cfg.train)?;
            let trainer = match &resume {
                Some(dir) => Trainer::resume(dir, &cfg.train, split)?,
                None => Trainer::new(&cfg.model, &cfg.train, split)?,
            };
            let mut trainer = trainer
                .with_metrics(out.join("metrics.jsonl"))
                .with_checkpoints(out.join("checkpoints"));
            trainer.run()?;
            weights_io::save(&trainer.weights, out.join("weights.dwrp"))?;
            let last = trainer.log.last().map_or(f64::NAN, |r| r.train_loss);
            println!(
                "trained {} to step {}: last loss {last:.5}; {} test pairs held out",
                trainer.model_config.variant,
                trainer.state.next_step,
                test.len()
            );
        }
        Command::Eval {
            common,
            weights,
            data,
            out,
        } => {
            let cfg = common.resolve()?;
            if weights.is_empty() {
                return Err(Error::Usage(
                    "eval needs at least one --weights file".into(),
                ));
            }
            let ds = load_or_synth(data.as_deref(), &cfg, common.seed(&cfg))?;
            let (_, test) = TrainData::split(&ds, &cfg.train)?;
            fs::create_dir_all(&out)?;
            let mut reports = Vec::new();
            for path in &weights {
                let w = weights_io::load(path)?;
                let report = eval::evaluate(&w, &ds, &test, 32)?;
                let name = path
                    .file_stem()
                    .map_or("model".into(), |s| s.to_string_lossy().into_owned());
                report.write_csv(out.join(format!("{name}.csv")))?;
                println!(
                    "{name} ({}): mean nmse {:.4} over {} pairs",
                    report.variant,
                    report.mean_nmse(),
                    report.records.len()
                );
                reports.push(report);
            }
            let refs: Vec<_> = reports.iter().collect();
            eval::plot_sorted_curves(&refs, out.join("sorted_errors.png"))?;
            eval::plot_angle_distribution(&refs, out.join("angle_errors.png"))?;
        }
        Command::Infer {
            common: _,
            weights,
            image,
            anchors,
            angle_v,
            angle_h,
            out,
            dump_mask,
        } => {
            let w = weights_io::load(&weights)?;
            let img = imageio::load_rgb(&image)?;
            let anchors = AnchorSidecar::load(&anchors)?;
            let (crop, local) = inference::prepare_input(&w, &img, &anchors)?;
            let pred = inference::redirect(
                &w,
                &crop,
                &local,
                AngleSpec {
                    vertical: angle_v,
                    horizontal: angle_h,
                },
            )?;
            imageio::save_rgb(&imageio::tensor_to_rgb(&pred.output, 0)?, &out)?;
            if let Some(path) = dump_mask {
                let mask = pred.mask.as_ref().ok_or_else(|| {
                    Error::Usage(format!(
                        "variant {} has no lightness mask",
                        w.config.variant
                    ))
                })?;
                let (h, wd, px) = lcm::mask_to_gray(mask, 0)?;
                let gray = image::GrayImage::from_raw(wd as u32, h as u32, px)
                    .expect("mask sized to extents");
                imageio::save_gray(&gray, path)?;
            }
        }
        Command::Sweep {
            common: _,
            weights,
            image,
            anchors,
            angle_min,
            angle_max,
            angle_h,
            steps,
            out,
        } => {
            let w = weights_io::load(&weights)?;
            let img = imageio::load_rgb(&image)?;
            let anchors = AnchorSidecar::load(&anchors)?;
            let (crop, local) = inference::prepare_input(&w, &img, &anchors)?;
            let angles = inference::linspace(angle_min, angle_max, steps);
            let strip = inference::sweep(&w, &crop, &local, &angles, angle_h)?;
            imageio::save_rgb(&strip, &out)?;
            println!("angles {angles:?} -> {}", out.display());
        }
        Command::Gradcheck { seed } => {
            let report = gradcheck::run_suites(&gradcheck::default_suites(seed));
            println!("{report}");
            if !report.passed() {
                return Err(Error::Tape("gradient check failed".into()));
            }
        }
        Command::Bench {
            common,
            weights,
            batch,
            iterations,
        } => {
            let cfg = common.resolve()?;
            let w = match weights {
                Some(p) => weights_io::load(p)?,
                None => ModelWeights::init(&cfg.model, common.seed(&cfg))?,
            };
            let size = weights_io::to_bytes(&w)?.len();
            println!(
                "{} model, {} parameters, weight file {size} bytes",
                w.config.variant,
                w.num_params()
            );
            for b in batch {
                let r = inference::bench(&w, b, iterations, common.seed(&cfg))?;
                println!(
                    "batch {:>3}: {:.3} ms/image mean, {:.3} ms p95, {:.1} images/s",
                    r.batch, r.mean_ms, r.p95_ms, r.images_per_sec
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("WARPNET_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
