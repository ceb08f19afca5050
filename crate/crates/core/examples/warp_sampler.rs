//! Warps a rendered eye by a swirl-shaped flow field and checks that a
//! zero flow reproduces the image bit for bit.
//!
//! cargo run --release --example warp_sampler -- [out_dir]

use warpnet::data::{extract_crop, render_frame, PersonParams, SequenceParams, SynthConfig};
use warpnet::encoding::AngleSpec;
use warpnet::imageio;
use warpnet::sampler::{warp, FlowField};
use warpnet::Tensor;

use rand::SeedableRng;

fn main() -> warpnet::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(std::env::temp_dir, Into::into);
    let cfg = SynthConfig::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let person = PersonParams::sample(&mut rng);
    let seq = SequenceParams::sample(&cfg, &mut rng);
    let (frame, anchors) = render_frame(&cfg, &person, &seq, AngleSpec::vertical(0.0));
    let (crop, _, _) = extract_crop(&frame, &anchors)?;
    let (h, w) = (crop.shape()[1], crop.shape()[2]);
    let image = crop.reshape([1, 3, h, w])?;

    let same = warp(&image, &FlowField::zeros(1, h, w))?;
    assert_eq!(same.values(), image.values());
    println!("zero flow: output identical to input");

    // rotate around the crop center by a few degrees
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let angle = 8f32.to_radians();
    let plane = h * w;
    let flow = Tensor::from_fn([1, 2, h, w], |i| {
        let (x, y) = ((i % plane % w) as f32 - cx, (i % plane / w) as f32 - cy);
        let (sx, sy) = (
            x * angle.cos() - y * angle.sin(),
            x * angle.sin() + y * angle.cos(),
        );
        if i < plane {
            sx - x
        } else {
            sy - y
        }
    });
    let rotated = warp(&image, &FlowField::new(flow)?)?;
    let tile = imageio::tile(&[vec![
        imageio::tensor_to_rgb(&image, 0)?,
        imageio::tensor_to_rgb(&rotated, 0)?,
    ]])?;
    let path = out.join("warp_sampler.png");
    imageio::save_rgb(&tile, &path)?;
    println!("input and rotated crop written to {}", path.display());
    Ok(())
}
