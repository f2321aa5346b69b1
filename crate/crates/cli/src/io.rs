//! Videos are directories of PNG frames, read in file-name order and written
//! as `00000.png`, `00001.png`, ... Control and mask sequences use the same
//! 0-based naming.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use invi_core::denoiser::{ControlImage, ControlKind};
use invi_core::postprocess::BinaryMask;

pub fn frame_name(index: usize) -> String {
    format!("{index:05}.png")
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every PNG in `dir`; all frames must share one size.
pub fn read_video(dir: &Path) -> Result<Vec<RgbImage>> {
    let files = png_files(dir)?;
    if files.is_empty() {
        bail!("{} contains no PNG frames", dir.display());
    }
    let frames = files
        .iter()
        .map(|p| {
            Ok(image::open(p)
                .with_context(|| format!("decoding {}", p.display()))?
                .to_rgb8())
        })
        .collect::<Result<Vec<_>>>()?;
    let dims = frames[0].dimensions();
    if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dimensions() != dims) {
        bail!(
            "frame {} ({}) is {:?}, first frame is {:?}",
            i + 1,
            files[i].display(),
            f.dimensions(),
            dims
        );
    }
    Ok(frames)
}

pub fn write_video(dir: &Path, frames: &[RgbImage]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (i, f) in frames.iter().enumerate() {
        let p = dir.join(frame_name(i));
        f.save(&p).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

/// Reads `00000.png .. {n-1}.png` from `dir`, resizing each to the crop size.
pub fn load_control_sequence(dir: &Path, kind: ControlKind, n: usize, crop: (u32, u32)) -> Result<Vec<ControlImage>> {
    (0..n)
        .map(|i| {
            let p = dir.join(frame_name(i));
            if !p.exists() {
                bail!("control image for frame index {i} is missing ({})", p.display());
            }
            let img = image::open(&p)
                .with_context(|| format!("decoding {}", p.display()))?
                .to_rgb8();
            Ok(ControlImage {
                image: fit(img, crop).with_context(|| format!("control {}", p.display()))?,
                kind,
            })
        })
        .collect()
}

/// Resizes to `size` unless already there. Zero-sized images are rejected.
pub fn fit(img: RgbImage, size: (u32, u32)) -> Result<RgbImage> {
    if img.width() == 0 || img.height() == 0 {
        bail!("image has zero size");
    }
    Ok(if img.dimensions() == size {
        img
    } else {
        imageops::resize(&img, size.0, size.1, FilterType::Triangle)
    })
}

/// Reads `n` masks (`00000.png` ...); nonzero pixels are set.
pub fn load_masks(dir: &Path, n: usize) -> Result<Vec<BinaryMask>> {
    (0..n)
        .map(|i| {
            let p = dir.join(frame_name(i));
            let img: GrayImage = image::open(&p)
                .with_context(|| format!("mask for frame index {i} ({})", p.display()))?
                .to_luma8();
            Ok(BinaryMask::from_gray(&img))
        })
        .collect()
}

/// Canny edge map as a three-channel control image.
pub fn canny_control(frame: &RgbImage, low: f32, high: f32) -> RgbImage {
    let gray = imageops::grayscale(frame);
    let edges = imageproc::edges::canny(&gray, low, high);
    RgbImage::from_fn(edges.width(), edges.height(), |x, y| {
        let v = edges.get_pixel(x, y)[0];
        image::Rgb([v, v, v])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn video_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<_> = (0..3)
            .map(|i| RgbImage::from_pixel(4, 2, image::Rgb([i, 2, 3])))
            .collect();
        write_video(dir.path(), &frames).unwrap();
        assert!(dir.path().join("00002.png").exists());
        assert_eq!(read_video(dir.path()).unwrap(), frames);
    }

    #[test]
    fn mixed_sizes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        RgbImage::new(4, 4).save(dir.path().join("a.png")).unwrap();
        RgbImage::new(4, 5).save(dir.path().join("b.png")).unwrap();
        let err = read_video(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frame 2"), "{err}");
        assert!(read_video(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn control_sequence_shapes() {
        let dir = tempfile::tempdir().unwrap();
        for (i, (w, h)) in [(64, 64), (100, 30), (8, 200)].into_iter().enumerate() {
            RgbImage::new(w, h).save(dir.path().join(frame_name(i))).unwrap();
        }
        let seq = load_control_sequence(dir.path(), ControlKind::Depth, 3, (64, 64)).unwrap();
        assert_eq!(seq.len(), 3);
        assert!(seq
            .iter()
            .all(|c| c.image.dimensions() == (64, 64) && c.kind == ControlKind::Depth));
        let err = load_control_sequence(dir.path(), ControlKind::Depth, 4, (64, 64))
            .unwrap_err()
            .to_string();
        assert!(err.contains("frame index 3"), "{err}");
        assert!(fit(RgbImage::new(0, 3), (4, 4)).is_err());
    }

    #[test]
    fn canny_finds_a_step_edge() {
        let img = RgbImage::from_fn(32, 32, |x, _| {
            if x < 16 {
                image::Rgb([0; 3])
            } else {
                image::Rgb([255; 3])
            }
        });
        let e = canny_control(&img, 50.0, 100.0);
        assert!(e.pixels().any(|p| p[0] == 255));
        assert!(e.get_pixel(3, 16)[0] == 0);
    }
}
