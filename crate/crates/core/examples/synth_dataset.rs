//! Renders a small synthetic dataset, writes it to disk and prints how the
//! mined training pairs spread over the correction bins.
//!
//! cargo run --release --example synth_dataset -- [out_dir]

use warpnet::data::{mine_pairs, synth_generate, Dataset, SynthConfig};
use warpnet::encoding::MAX_ANGLE;
use warpnet::training::{bin_index, bin_range, NUM_BINS};

fn main() -> warpnet::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("warpnet_synth"), Into::into);
    let cfg = SynthConfig {
        persons: 4,
        sequences_per_person: 2,
        frames_per_sequence: 20,
        ..SynthConfig::default()
    };
    let ds = synth_generate(&cfg, 1)?;
    ds.save(&out)?;
    let back = Dataset::load(&out)?;
    assert_eq!(back.num_frames(), ds.num_frames());
    println!(
        "{} persons, {} sequences, {} frames in {}",
        ds.persons().len(),
        ds.sequences.len(),
        ds.num_frames(),
        out.display()
    );

    let pairs = mine_pairs(&ds, MAX_ANGLE);
    let mut hist = [0usize; NUM_BINS];
    for p in &pairs {
        if let Some(b) = bin_index(p.correction.vertical) {
            hist[b] += 1;
        }
    }
    for (b, n) in hist.iter().enumerate() {
        let (lo, hi) = bin_range(b);
        println!("[{lo:>5.1}, {hi:>5.1})  {n:>5}  {}", "#".repeat(n / 20));
    }
    Ok(())
}
