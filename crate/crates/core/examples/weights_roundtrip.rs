//! Saves every model variant, reloads it and confirms the outputs match bit
//! for bit.
//!
//! cargo run --release --example weights_roundtrip

use rand::{Rng, SeedableRng};
use warpnet::encoding::{AnchorSet, AngleSpec};
use warpnet::warping_net::{Batch, ModelConfig, ModelWeights, Variant};
use warpnet::{weights_io, Tensor};

fn main() -> warpnet::Result<()> {
    let dir = std::env::temp_dir();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let anchors = AnchorSet::new([
        [4.0, 20.0],
        [15.0, 12.0],
        [35.0, 12.0],
        [46.0, 20.0],
        [35.0, 29.0],
        [15.0, 29.0],
        [25.0, 20.0],
    ])?;
    let batch = Batch {
        images: Tensor::from_fn([4, 3, 41, 51], |_| rng.gen_range(0.0..1.0)),
        anchors: vec![anchors; 4],
        angles: (0..4)
            .map(|i| AngleSpec::vertical(-15.0 + 10.0 * i as f32))
            .collect(),
    };
    for variant in Variant::ALL {
        let w = ModelWeights::<f32>::init(&ModelConfig::with_variant(variant), 11)?;
        let path = dir.join(format!("warpnet_{variant}.dwrp"));
        weights_io::save(&w, &path)?;
        let back = weights_io::load(&path)?;
        let (a, b) = (w.predict(&batch)?, back.predict(&batch)?);
        assert_eq!(a.output.values(), b.output.values());
        let size = std::fs::metadata(&path)?.len();
        println!(
            "{variant:>8}: {:>7} parameters, {size:>7} bytes, outputs identical",
            w.num_params()
        );
    }
    Ok(())
}
