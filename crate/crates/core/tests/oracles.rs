//! Kernels against direct reference implementations.

mod common;

use common::*;
use rand::Rng;
use warpnet::encoding::{anchor_maps, AnchorSet};
use warpnet::real::MatRef;
use warpnet::sampler::{warp, FlowField};
use warpnet::tape::{BnMode, Tape};
use warpnet::{Real, Tensor};

#[test]
fn gemm_matches_triple_loop() {
    let mut r = rng(1);
    for (m, k, n) in [(1, 1, 1), (3, 7, 5), (16, 33, 9), (64, 75, 41)] {
        let a: Vec<f64> = (0..m * k).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut c = vec![0.0; m * n];
        f64::gemm(
            m,
            k,
            n,
            MatRef::row_major(&a, k),
            MatRef::row_major(&b, n),
            0.0,
            &mut c,
        );
        assert!(max_abs_diff(&c, &matmul_oracle(&a, &b, m, k, n)) < 1e-12);
    }
}

#[test]
fn conv_matches_direct_loops() {
    let mut r = rng(2);
    for (kernel, ci, co, h, w) in [
        (1, 2, 3, 4, 5),
        (3, 3, 4, 6, 7),
        (5, 33, 8, 9, 11),
        (7, 2, 2, 3, 4),
    ] {
        let x = random_tensor(&mut r, &[2, ci, h, w], -1.0, 1.0);
        let wt = random_tensor(&mut r, &[co, ci, kernel, kernel], -1.0, 1.0);
        let bias: Vec<f64> = (0..co).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::<f64>::new();
        let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(wt.clone()));
        let bv = tape.leaf(Tensor::new([co], bias.clone()).unwrap());
        let y = tape.conv2d_same(xv, wv, bv).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, co, h, w]);
        assert!(max_abs_diff(tape.value(y).values(), &conv_oracle(&x, &wt, &bias)) < 1e-10);
    }
}

#[test]
fn sampler_matches_four_neighbor_oracle() {
    let mut r = rng(3);
    for _ in 0..200 {
        let (h, w) = (r.gen_range(1..9), r.gen_range(1..9));
        let img = random_tensor(&mut r, &[2, 3, h, w], 0.0, 1.0);
        let flow = random_tensor(&mut r, &[2, 2, h, w], -4.0, 4.0);
        let out = warp(&img, &FlowField::new(flow.clone()).unwrap()).unwrap();
        assert!(max_abs_diff(out.values(), &warp_oracle(&img, &flow)) < 1e-12);
    }
}

#[test]
fn single_precision_sampler_tracks_the_oracle() {
    let mut r = rng(4);
    let img = random_tensor(&mut r, &[1, 3, 41, 51], 0.0, 1.0);
    let flow = random_tensor(&mut r, &[1, 2, 41, 51], -3.0, 3.0);
    let out = warp(
        &img.cast::<f32>(),
        &FlowField::new(flow.cast::<f32>()).unwrap(),
    )
    .unwrap();
    let got: Vec<f64> = out.values().iter().map(|&v| v as f64).collect();
    let want = warp_oracle(
        &img.cast::<f32>().cast::<f64>(),
        &flow.cast::<f32>().cast::<f64>(),
    );
    assert!(max_abs_diff(&got, &want) < 1e-5);
}

#[test]
fn batchnorm_matches_textbook_formula() {
    let mut r = rng(5);
    let x = random_tensor(&mut r, &[3, 2, 4, 5], -2.0, 3.0);
    let gamma = [1.5, 0.5];
    let beta = [0.1, -0.2];
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(x.clone());
    let g = tape.leaf(Tensor::new([2], gamma.to_vec()).unwrap());
    let b = tape.leaf(Tensor::new([2], beta.to_vec()).unwrap());
    let (y, stats) = tape.batchnorm(xv, g, b, 1e-5, BnMode::Train).unwrap();
    let stats = stats.unwrap();
    let plane = 20;
    for c in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|n| x.values()[(n * 2 + c) * plane..][..plane].to_vec())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((stats.mean[c] - mean).abs() < 1e-12);
        assert!((stats.var_unbiased[c] - var * n / (n - 1.0)).abs() < 1e-12);
        for s in 0..3 {
            for i in 0..plane {
                let idx = (s * 2 + c) * plane + i;
                let want = gamma[c] * (x.values()[idx] - mean) / (var + 1e-5).sqrt() + beta[c];
                assert!((tape.value(y).values()[idx] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn upsampling_uses_half_pixel_alignment() {
    let mut r = rng(6);
    let (h, w) = (3, 4);
    let x = random_tensor(&mut r, &[1, 1, h, w], -1.0, 1.0);
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(x.clone());
    let y = tape.upsample2x(xv).unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape(), &[1, 1, 2 * h, 2 * w]);
    for i in 0..2 * h {
        for j in 0..2 * w {
            let want = bilinear_at(
                x.values(),
                h,
                w,
                (j as f64 + 0.5) / 2.0 - 0.5,
                (i as f64 + 0.5) / 2.0 - 0.5,
            );
            assert!((out.values()[i * 2 * w + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn anchor_maps_are_signed_offsets() {
    let pts = [
        [1.0, 2.0],
        [3.5, 0.5],
        [6.0, 0.0],
        [8.0, 2.0],
        [6.0, 4.0],
        [3.0, 4.0],
        [4.5, 2.25],
    ];
    let a = AnchorSet::new(pts).unwrap();
    let m = anchor_maps::<f64>(&a, 5, 9);
    assert_eq!(m.shape(), &[14, 5, 9]);
    for (i, p) in pts.iter().enumerate() {
        for y in 0..5 {
            for x in 0..9 {
                assert_eq!(m.values()[(2 * i) * 45 + y * 9 + x], x as f64 - p[0] as f64);
                assert_eq!(
                    m.values()[(2 * i + 1) * 45 + y * 9 + x],
                    y as f64 - p[1] as f64
                );
            }
        }
    }
}
