//! Property tests for module invariants.

mod common;

use proptest::prelude::*;
use warpnet::config::ExperimentConfig;
use warpnet::encoding::{anchor_maps, AnchorSet};
use warpnet::lcm;
use warpnet::sampler::{warp, FlowField};
use warpnet::tape::{BnMode, Distance, Tape};
use warpnet::training::{bin_index, bin_range};
use warpnet::warping_net::{ModelConfig, ModelWeights, Variant};
use warpnet::{weights_io, Tensor};

fn tensor(shape: Vec<usize>, lo: f32, hi: f32) -> impl Strategy<Value = Tensor<f32>> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Tensor::new(shape.clone(), v).unwrap())
}

fn image() -> impl Strategy<Value = Tensor<f32>> {
    (1usize..3, 1usize..9, 1usize..9).prop_flat_map(|(b, h, w)| tensor(vec![b, 3, h, w], 0.0, 1.0))
}

fn image_and_flow(max: f32) -> impl Strategy<Value = (Tensor<f32>, Tensor<f32>)> {
    (1usize..3, 1usize..9, 1usize..9).prop_flat_map(move |(b, h, w)| {
        (
            tensor(vec![b, 3, h, w], 0.0, 1.0),
            tensor(vec![b, 2, h, w], -max, max),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_flow_is_bitwise_identity(img in image()) {
        let (b, _, h, w) = img.dims4().unwrap();
        let out = warp(&img, &FlowField::zeros(b, h, w)).unwrap();
        prop_assert_eq!(out.values(), img.values());
    }

    #[test]
    fn warp_stays_within_image_range((img, flow) in image_and_flow(6.0)) {
        let out = warp(&img, &FlowField::new(flow).unwrap()).unwrap();
        let lo = img.values().iter().copied().fold(f32::INFINITY, f32::min);
        let hi = img.values().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(out.values().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
    }

    #[test]
    fn integer_shift_round_trip_restores_interior(img in image(), d in 0usize..4) {
        let (b, _, h, w) = img.dims4().unwrap();
        let there = warp(&img, &FlowField::constant(b, h, w, d as f32, 0.0)).unwrap();
        let back = warp(&there, &FlowField::constant(b, h, w, -(d as f32), 0.0)).unwrap();
        for (i, (&a, &o)) in back.values().iter().zip(img.values()).enumerate() {
            if i % w >= d {
                prop_assert_eq!(a, o);
            }
        }
    }

    #[test]
    fn mirroring_a_flow_twice_is_identity((_, flow) in image_and_flow(3.0)) {
        let f = FlowField::new(flow).unwrap();
        prop_assert_eq!(f.mirrored().mirrored(), f);
    }

    #[test]
    fn conv_keeps_spatial_extents(k in prop::sample::select(vec![1usize, 3, 5, 7]), h in 1usize..8, w in 1usize..8) {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full([2, 3, h, w], 0.5));
        let wt = tape.leaf(Tensor::full([4, 3, k, k], 0.1));
        let b = tape.leaf(Tensor::zeros([4]));
        let y = tape.conv2d_same(x, wt, b).unwrap();
        prop_assert_eq!(tape.value(y).shape(), &[2, 4, h, w]);
    }

    #[test]
    fn inference_batchnorm_is_pure(x in tensor(vec![2, 3, 4, 4], -2.0, 2.0)) {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let xv = tape.leaf(x.clone());
            let g = tape.leaf(Tensor::new([3], vec![1.0, 2.0, 0.5]).unwrap());
            let b = tape.leaf(Tensor::new([3], vec![0.0, 0.1, -0.1]).unwrap());
            let mode = BnMode::Infer { running_mean: &[0.1, -0.2, 0.0], running_var: &[1.0, 0.5, 2.0] };
            let (y, stats) = tape.batchnorm(xv, g, b, 1e-5, mode).unwrap();
            assert!(stats.is_none());
            tape.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn lightness_blend_is_monotone_convex_and_in_range(
        img in tensor(vec![2, 3, 3, 4], 0.0, 1.0),
        mask in tensor(vec![2, 1, 3, 4], 0.0, 1.0),
    ) {
        let out = lcm::blend(&img, &mask).unwrap();
        for (i, (&o, &x)) in out.values().iter().zip(img.values()).enumerate() {
            let (n, p) = (i / 36, i % 12);
            let m = mask.values()[n * 12 + p];
            prop_assert!(o >= x);
            prop_assert!((0.0..=1.0).contains(&o));
            prop_assert!((o - (x * (1.0 - m) + m)).abs() < 1e-6);
        }
    }

    #[test]
    fn registration_loss_never_exceeds_center_l2(
        out in tensor(vec![2, 3, 4, 5], 0.0, 1.0),
        big in tensor(vec![2, 3, 10, 11], 0.0, 1.0),
    ) {
        let mut tape = Tape::<f32>::new();
        let o = tape.leaf(out);
        let reg = tape.registration_loss(o, &big, 3, Distance::L2).unwrap();
        let center = Tensor::from_fn([2, 3, 4, 5], |i| {
            let (nc, y, x) = (i / 20, (i / 5) % 4, i % 5);
            big.values()[(nc * 10 + y + 3) * 11 + x + 3]
        });
        let l2 = tape.mse(o, &center).unwrap();
        prop_assert!(tape.value(reg).item().unwrap() <= tape.value(l2).item().unwrap() + 1e-7);
    }

    #[test]
    fn every_angle_in_range_has_a_bin(a in -30.0f32..=30.0) {
        let b = bin_index(a).unwrap();
        let (lo, hi) = bin_range(b);
        prop_assert!(lo <= a && (a < hi || (b == 14 && a <= hi)));
    }

    #[test]
    fn angles_outside_range_have_no_bin(a in 30.0001f32..90.0) {
        prop_assert!(bin_index(a).is_none());
        prop_assert!(bin_index(-a).is_none());
    }

    #[test]
    fn anchor_maps_have_unit_slope(pts in prop::array::uniform7(prop::array::uniform2(-5.0f32..60.0))) {
        let a = AnchorSet::new(pts).unwrap();
        let m = anchor_maps::<f32>(&a, 6, 7);
        for c in 0..14 {
            let plane = &m.values()[c * 42..][..42];
            for y in 0..6 {
                for x in 0..7 {
                    let v = plane[y * 7 + x];
                    if c % 2 == 0 && x > 0 {
                        prop_assert!((v - plane[y * 7 + x - 1] - 1.0).abs() < 1e-4);
                    }
                    if c % 2 == 1 && y > 0 {
                        prop_assert!((v - plane[(y - 1) * 7 + x] - 1.0).abs() < 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn unknown_override_keys_are_rejected(key in "[a-z]{3,10}\\.[a-z_]{3,12}") {
        let mut cfg = ExperimentConfig::default();
        let known = serde_json::to_value(&cfg).unwrap();
        let (section, field) = key.split_once('.').unwrap();
        prop_assume!(known.get(section).and_then(|s| s.get(field)).is_none());
        let assignment = format!("{}=1", key);
        prop_assert!(cfg.apply_override(&assignment).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn weights_survive_a_file_round_trip(seed in any::<u64>(), v in prop::sample::select(Variant::ALL.to_vec())) {
        let cfg = ModelConfig { variant: v, tower_channels: vec![4, 6, 4, 3, 2], lcm_channels: vec![3, 1], ..ModelConfig::default() };
        let w = ModelWeights::<f32>::init(&cfg, seed).unwrap();
        let back = weights_io::from_bytes(&weights_io::to_bytes(&w).unwrap()).unwrap();
        prop_assert_eq!(back, w);
    }
}
