//! Brightens a rendered eye with a hand-made lightness mask, the operation
//! the lightness correction module applies after warping.
//!
//! cargo run --release --example lightness_blend -- [out_dir]

use rand::SeedableRng;
use warpnet::data::{extract_crop, render_frame, PersonParams, SequenceParams, SynthConfig};
use warpnet::encoding::AngleSpec;
use warpnet::{imageio, lcm, Tensor};

fn main() -> warpnet::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(std::env::temp_dir, Into::into);
    let cfg = SynthConfig::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let person = PersonParams::sample(&mut rng);
    let seq = SequenceParams::sample(&cfg, &mut rng);
    let (frame, anchors) = render_frame(&cfg, &person, &seq, AngleSpec::vertical(-10.0));
    let (crop, local, _) = extract_crop(&frame, &anchors)?;
    let (h, w) = (crop.shape()[1], crop.shape()[2]);
    let image = crop.reshape([1, 3, h, w])?;

    // a soft band along the upper lid, where a lowered gaze exposes sclera
    let [ux, uy] = local.points[1];
    let mask = Tensor::from_fn([1, 1, h, w], |i| {
        let (x, y) = ((i % w) as f32, (i / w) as f32);
        let d = ((x - ux - 8.0) / 14.0).powi(2) + ((y - uy - 3.0) / 4.0).powi(2);
        0.6 * (-d).exp()
    });
    let bright = lcm::blend(&image, &mask)?;
    assert!(bright
        .values()
        .iter()
        .zip(image.values())
        .all(|(o, i)| o >= i));
    println!("mean mask {:.4}", lcm::mean_mask(&mask)?[0]);

    let (mh, mw, px) = lcm::mask_to_gray(&mask, 0)?;
    let gray = image::GrayImage::from_raw(mw as u32, mh as u32, px).expect("sized");
    let strip = imageio::tile(&[vec![
        imageio::tensor_to_rgb(&image, 0)?,
        image::DynamicImage::ImageLuma8(gray).to_rgb8(),
        imageio::tensor_to_rgb(&bright, 0)?,
    ]])?;
    let path = out.join("lightness_blend.png");
    imageio::save_rgb(&strip, &path)?;
    println!("input, mask and result written to {}", path.display());
    Ok(())
}
