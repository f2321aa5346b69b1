#![allow(dead_code)]

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use invi_cli::{frame_name, RunManifest};
use invi_core::denoiser::ControlKind;
use invi_core::roi::Rect;

/// A clip with 8x8 constant-color blocks that drift one block every frame.
pub fn block_video(n: usize, w: u32, h: u32) -> Vec<RgbImage> {
    (0..n)
        .map(|i| {
            RgbImage::from_fn(w, h, |x, y| {
                let (bx, by) = (x / 8 + i as u32, y / 8);
                Rgb([
                    ((bx * 37 + by * 11) % 256) as u8,
                    ((bx * 5 + by * 53 + 20) % 256) as u8,
                    ((bx * 71 + by * 29 + 90) % 256) as u8,
                ])
            })
        })
        .collect()
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub frames: Vec<RgbImage>,
    pub boxes: Vec<Rect>,
}

impl Fixture {
    pub fn new(frames: Vec<RgbImage>, boxes: Vec<Rect>, config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for sub in ["video", "control"] {
            std::fs::create_dir_all(root.join(sub)).unwrap();
        }
        for (i, f) in frames.iter().enumerate() {
            f.save(root.join("video").join(frame_name(i))).unwrap();
            RgbImage::new(f.width(), f.height())
                .save(root.join("control").join(frame_name(i)))
                .unwrap();
        }
        let track: String = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| format!("{i} {} {} {} {}\n", b.x, b.y, b.w, b.h))
            .collect();
        std::fs::write(root.join("boxes.txt"), track).unwrap();
        std::fs::write(root.join("config.txt"), config).unwrap();
        Self { dir, frames, boxes }
    }

    pub fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    pub fn manifest(&self, out: &str) -> RunManifest {
        RunManifest {
            video: self.path("video"),
            boxes: self.path("boxes.txt"),
            control: self.path("control"),
            control_kind: ControlKind::Pose,
            prompt: "a red ball".into(),
            config: Some(self.path("config.txt")),
            out: self.path(out),
            mode: None,
            postprocess: None,
            dump_frames: None,
        }
    }
}

pub fn read_frames(dir: &Path) -> Vec<RgbImage> {
    invi_cli::read_video(dir).unwrap()
}
