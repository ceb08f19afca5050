//! Redirects one synthetic eye over a range of vertical angles and tiles
//! the results into a strip. Pass a weight file to use trained weights.
//!
//! cargo run --release --example sweep -- [weights.dwrp] [out_dir]

use warpnet::data::SynthConfig;
use warpnet::inference::{linspace, sweep};
use warpnet::warping_net::{ModelConfig, ModelWeights};
use warpnet::{imageio, weights_io};

fn main() -> warpnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let weights = match args.next() {
        Some(p) => weights_io::load(p)?,
        None => ModelWeights::init(&ModelConfig::default(), 0)?,
    };
    let out = args.next().map_or_else(std::env::temp_dir, Into::into);

    let ds = warpnet::data::synth_generate(
        &SynthConfig {
            persons: 2,
            sequences_per_person: 2,
            frames_per_sequence: 3,
            ..SynthConfig::default()
        },
        4,
    )?;
    let sample = ds.sample(0, 1)?;
    let angles = linspace(-15.0, 15.0, 7);
    let strip = sweep(&weights, &sample.image, &sample.anchors, &angles, 0.0)?;
    let path = out.join("sweep.png");
    imageio::save_rgb(&strip, &path)?;
    println!(
        "input gaze {:.1} deg, corrections {angles:?} -> {}",
        sample.gaze.vertical,
        path.display()
    );
    Ok(())
}
