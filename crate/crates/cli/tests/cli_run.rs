mod common;

use std::process::Command;

use common::{block_video, read_frames, Fixture};
use invi_core::roi::Rect;

const TINY: &str = "crop_w = 64\ncrop_h = 64\nsteps_train = 100\nsteps_infer = 3\nguidance_scale = 2.0\n";

fn invi() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_invi"));
    c.env("RUST_LOG", "warn");
    c
}

fn run_args(fx: &Fixture, out: &str) -> Command {
    let mut c = invi();
    c.arg("run")
        .arg("--video")
        .arg(fx.path("video"))
        .arg("--boxes")
        .arg(fx.path("boxes.txt"))
        .arg("--control")
        .arg(fx.path("control"))
        .args(["--control-kind", "pose", "--prompt", "a red ball"])
        .arg("--config")
        .arg(fx.path("config.txt"))
        .arg("--out")
        .arg(fx.path(out));
    c
}

fn moving_boxes(n: usize) -> Vec<Rect> {
    (0..n as u32).map(|i| Rect::new(20 + 2 * i, 24, 20, 16)).collect()
}

#[test]
fn smoke_run_emits_every_frame() {
    let fx = Fixture::new(block_video(24, 128, 96), moving_boxes(24), TINY);
    let out = run_args(&fx, "out")
        .arg("--dump-frames")
        .arg(fx.path("dump"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("wrote 24 frames"));
    let frames = read_frames(&fx.path("out"));
    assert_eq!(frames.len(), 24);
    assert!(frames.iter().all(|f| f.dimensions() == (128, 96)));
    assert!(fx.path("dump/crop_00023.png").exists());
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.path("dump/stats.json")).unwrap()).unwrap();
    assert_eq!(stats["frames"], 24);
    assert_eq!(stats["anchor_sequence"].as_array().unwrap().len(), 23);
}

#[test]
fn missing_box_file_fails_before_work() {
    let fx = Fixture::new(block_video(2, 64, 64), moving_boxes(2), TINY);
    std::fs::remove_file(fx.path("boxes.txt")).unwrap();
    let out = run_args(&fx, "out").output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("box track") && err.contains("does not exist"), "{err}");
    assert!(!fx.path("out").exists());
}

#[test]
fn box_count_must_match_frames() {
    let fx = Fixture::new(block_video(3, 64, 64), moving_boxes(2), TINY);
    let out = run_args(&fx, "out").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("box track has 2 frames, video has 3"));
}

#[test]
fn missing_control_is_named() {
    let fx = Fixture::new(block_video(3, 64, 64), moving_boxes(3), TINY);
    std::fs::remove_file(fx.path("control/00002.png")).unwrap();
    let out = run_args(&fx, "out").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("frame index 2"));
}

#[test]
fn bad_config_key_is_reported() {
    let fx = Fixture::new(block_video(2, 64, 64), moving_boxes(2), "crop_size = 64\n");
    let out = run_args(&fx, "out").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("crop_size"));
}

#[test]
fn env_overrides_config_file() {
    let fx = Fixture::new(block_video(2, 64, 64), moving_boxes(2), TINY);
    let out = run_args(&fx, "out").env("INVI_STEPS_INFER", "0").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("steps_infer"));
}

#[test]
fn zero_denoiser_with_empty_boxes_is_identity_and_scores_zero() {
    let frames = block_video(8, 128, 96);
    let fx = Fixture::new(
        frames.clone(),
        vec![Rect::new(48, 32, 0, 0); 8],
        "denoiser = toy:zero\ncrop_w = 64\ncrop_h = 64\nsteps_infer = 8\n",
    );
    let out = run_args(&fx, "out").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_frames(&fx.path("out")), frames);

    let masks = fx.path("masks");
    invi_cli::write_video(
        &masks,
        &vec![image::RgbImage::from_pixel(128, 96, image::Rgb([255; 3])); 8],
    )
    .unwrap();
    let out = invi()
        .arg("eval")
        .arg("--original")
        .arg(fx.path("video"))
        .arg("--edited")
        .arg(fx.path("out"))
        .arg("--mask")
        .arg(&masks)
        .args(["--prompt", "a red ball", "--json"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["back_l1"], 0.0);
    assert_eq!(report["frames"], 8);
    assert!(report["clip_temp"].as_f64().unwrap() > 0.0);
}

#[test]
fn per_frame_mode_and_postprocess_switch() {
    let fx = Fixture::new(block_video(3, 96, 64), moving_boxes(3), TINY);
    let out = run_args(&fx, "a")
        .args(["--mode", "per-frame", "--postprocess", "off"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_frames(&fx.path("a")).len(), 3);
}

#[test]
fn canny_writes_one_control_per_frame() {
    let fx = Fixture::new(block_video(3, 64, 48), moving_boxes(3), TINY);
    let out = invi()
        .arg("canny")
        .arg("--video")
        .arg(fx.path("video"))
        .arg("--out")
        .arg(fx.path("edges"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let edges = read_frames(&fx.path("edges"));
    assert_eq!(edges.len(), 3);
    assert!(edges[0].pixels().any(|p| p[0] == 255));
}
