//! End-to-end runs of the `warpnet` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn warpnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_warpnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

const SMALL: &[&str] = &[
    "synth.persons=4",
    "synth.sequences_per_person=2",
    "synth.frames_per_sequence=6",
    "synth.gaze_step=6",
    "train.test_persons=1",
    "train.batch_size=3",
    "train.bins_per_batch=1",
    "train.easy_per_bin=2",
    "train.hard_per_bin=1",
    "train.iterations=3",
    "train.val_every=0",
    "model.variant=CFW_LCM",
    "model.tower_channels=[4,4,4,4,2]",
    "model.lcm_channels=[3,2,1]",
];

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL.iter().copied()).collect()
}

fn write_sidecar(data: &Path, out: &Path) {
    let meta = fs::read_to_string(data.join("person_000/seq_00/meta.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(meta.lines().next().unwrap()).unwrap();
    fs::write(
        out,
        serde_json::json!({ "anchors": first["anchors"] }).to_string(),
    )
    .unwrap();
}

#[test]
fn unknown_keys_and_bad_flags_exit_with_two() {
    let o = warpnet(&["synth-data", "--out", "/nonexistent", "synth.personz=3"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("synth.personz"));
    assert_eq!(code(&warpnet(&["train", "--no-such-flag"])), 2);
    assert_eq!(code(&warpnet(&["frobnicate"])), 2);
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = warpnet(&[
        "sweep",
        "--weights",
        dir.path().join("missing.dwrp").to_str().unwrap(),
        "--image",
        "x.png",
        "--anchors",
        "a.json",
        "--out",
        "o.png",
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_passes_and_reports_every_suite() {
    let o = warpnet(&["gradcheck"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{text}");
    for name in [
        "sampler",
        "conv",
        "batchnorm",
        "fully_connected",
        "upsample",
        "lcm_blend",
        "registration",
        "cfw_lcm_graph",
    ] {
        assert!(text.contains(name), "{name} missing from\n{text}");
    }
    assert!(text.contains("max rel error"));
}

#[test]
fn synthesis_is_deterministic_given_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = warpnet(&with_small(&[
            "synth-data",
            "--seed",
            "5",
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let rel = "person_001/seq_01";
    assert_eq!(
        fs::read(a.join(rel).join("meta.jsonl")).unwrap(),
        fs::read(b.join(rel).join("meta.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(a.join(rel).join("frame_003.png")).unwrap(),
        fs::read(b.join(rel).join("frame_003.png")).unwrap()
    );
}

#[test]
fn train_eval_infer_sweep_bench_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let (data, run) = (p("data"), p("run"));
    assert_eq!(
        code(&warpnet(&with_small(&["synth-data", "--out", &data]))),
        0
    );

    let o = warpnet(&with_small(&["train", "--data", &data, "--out", &run]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let weights = format!("{run}/weights.dwrp");
    let metrics = fs::read_to_string(format!("{run}/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(Path::new(&format!("{run}/config.json")).exists());

    let o = warpnet(&with_small(&[
        "eval",
        "--data",
        &data,
        "--weights",
        &weights,
        "--out",
        &p("eval"),
    ]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("eval/weights.csv")).unwrap();
    assert!(csv.starts_with("pair_id,v_angle,h_angle,mse_model,mse_input,nmse"));
    assert!(dir.path().join("eval/sorted_errors.png").exists());

    let sidecar = p("anchors.json");
    write_sidecar(Path::new(&data), Path::new(&sidecar));
    let frame = format!("{data}/person_000/seq_00/frame_000.png");
    let o = warpnet(&[
        "infer",
        "--weights",
        &weights,
        "--image",
        &frame,
        "--anchors",
        &sidecar,
        "--angle-v",
        "-10",
        "--out",
        &p("out.png"),
        "--dump-mask",
        &p("mask.png"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        image::open(p("out.png")).unwrap().to_rgb8().dimensions(),
        (51, 41)
    );
    assert_eq!(
        image::open(p("mask.png")).unwrap().to_luma8().dimensions(),
        (51, 41)
    );

    let o = warpnet(&[
        "sweep",
        "--weights",
        &weights,
        "--image",
        &frame,
        "--anchors",
        &sidecar,
        "--steps",
        "5",
        "--out",
        &p("sweep.png"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("[-15.0, -7.5, 0.0, 7.5, 15.0]"));
    assert_eq!(
        image::open(p("sweep.png")).unwrap().to_rgb8().width(),
        5 * 51
    );

    let o = warpnet(&[
        "bench",
        "--weights",
        &weights,
        "--batch",
        "1,2",
        "--iterations",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("images/s"));
}
