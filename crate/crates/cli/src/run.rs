use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use image::RgbImage;
use invi_core::denoiser::ControlKind;
use invi_core::pipeline::{EditConfig, FrameInputs, Mode, Pipeline, RunStats};
use invi_core::postprocess::{
    postprocess_crop, BandInpainterClient, FailingInpainter, HaloSettings, ProcessBandInpainter, ProcessClient,
    ProcessSegmenter, RetryPolicy, SegmenterClient, StaticSegmenter,
};
use invi_core::roi::{composite_back, crop_and_encode, expand_boxes, BoxTrack, Rect};
use invi_core::scheduler::LatentFrame;
use log::{info, warn};
use rayon::prelude::*;

use crate::io::{fit, load_control_sequence, read_video, write_video};

/// Everything `invi run` needs; paths are checked before any work starts.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub video: PathBuf,
    pub boxes: PathBuf,
    pub control: PathBuf,
    pub control_kind: ControlKind,
    pub prompt: String,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub mode: Option<Mode>,
    pub postprocess: Option<bool>,
    pub dump_frames: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub frames: usize,
    pub latents: Vec<LatentFrame>,
    pub stats: RunStats,
    pub postprocessed: bool,
}

impl RunManifest {
    pub fn check_paths(&self) -> Result<()> {
        let mut required: Vec<(&str, &Path)> = vec![
            ("video", &self.video),
            ("box track", &self.boxes),
            ("control directory", &self.control),
        ];
        if let Some(c) = &self.config {
            required.push(("config", c));
        }
        for (what, p) in required {
            if !p.exists() {
                bail!("{what} {} does not exist", p.display());
            }
        }
        Ok(())
    }

    /// Defaults, then the config file, then `INVI_*` variables, then flags.
    pub fn resolve_config(&self) -> Result<EditConfig> {
        let mut cfg = match &self.config {
            Some(p) => EditConfig::from_file(p)?,
            None => EditConfig::default(),
        };
        cfg.apply_process_env()?;
        cfg.prompt = self.prompt.clone();
        cfg.control_kind = self.control_kind;
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(p) = self.postprocess {
            cfg.postprocess = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn segmenter_for(cfg: &EditConfig, crop: (u32, u32), local_box: Rect) -> Result<Box<dyn SegmenterClient>> {
    Ok(match &cfg.segmenter_cmd {
        Some(cmd) => Box::new(ProcessSegmenter(ProcessClient::new(cmd, policy(cfg))?)),
        None => Box::new(StaticSegmenter::rect(crop.0, crop.1, local_box, 1.0)),
    })
}

fn policy(cfg: &EditConfig) -> RetryPolicy {
    RetryPolicy {
        timeout: Duration::from_millis(cfg.client_timeout_ms),
        retries: cfg.client_retries,
    }
}

pub fn run_command(m: &RunManifest) -> Result<RunSummary> {
    m.check_paths()?;
    let cfg = m.resolve_config()?;
    let boxes = BoxTrack::load(&m.boxes).with_context(|| format!("box track {}", m.boxes.display()))?;
    let frames = read_video(&m.video)?;
    let n = frames.len();
    if boxes.n_frames() != n {
        bail!("box track has {} frames, video has {n}", boxes.n_frames());
    }
    let (fw, fh) = frames[0].dimensions();
    let roi = expand_boxes(&boxes, fw, fh, cfg.crop_w, cfg.crop_h, cfg.margin)?;
    let crop_size = (cfg.crop_w, cfg.crop_h);
    let raw_controls = load_control_sequence(&m.control, cfg.control_kind, n, (fw, fh))?;

    let pipeline = Pipeline::from_config(cfg.clone())?;
    info!(
        "{n} frames {fw}x{fh}, crop {}x{}, denoiser {}, mode {}",
        cfg.crop_w,
        cfg.crop_h,
        pipeline.denoiser.descriptor(),
        cfg.mode
    );

    let prepared = frames
        .par_iter()
        .zip(&raw_controls)
        .enumerate()
        .map(|(i, (frame, control))| {
            let (crop, bbox) = (roi.crops[i], roi.boxes[i]);
            let enc = crop_and_encode(frame, crop, bbox, &pipeline.vae, i + 1)
                .with_context(|| format!("frame {}: cropping and encoding", i + 1))?;
            // Controls are read at frame size, then cropped to the region.
            let view = image::imageops::crop_imm(&control.image, crop.x, crop.y, crop.w, crop.h).to_image();
            let mut control = control.clone();
            control.image = fit(view, crop_size)?;
            Ok((
                FrameInputs {
                    bg_latent: enc.bg_latent,
                    masked_bg_latent: enc.masked_bg_latent,
                    mask: enc.mask,
                    control: Some(control),
                },
                enc.crop,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (inputs, source_crops): (Vec<_>, Vec<_>) = prepared.into_iter().unzip();

    let result = pipeline.run(&inputs, &mut ())?;

    let full_frame = roi.is_full_frame(fw, fh);
    let postprocessed = cfg.postprocess && !full_frame;
    if cfg.postprocess && full_frame {
        info!("crop covers the whole frame; skipping halo post-processing");
    }
    let inpainter: Box<dyn BandInpainterClient> = match &cfg.inpainter_cmd {
        Some(cmd) => Box::new(ProcessBandInpainter(ProcessClient::new(cmd, policy(&cfg))?)),
        None => {
            if postprocessed {
                warn!("no band inpainter configured; the halo band will be cross-faded");
            }
            Box::new(FailingInpainter)
        }
    };
    let settings = HaloSettings {
        radius: cfg.effective_dilation_radius(),
        threshold: cfg.mask_threshold,
    };
    let label = cfg.effective_label();
    let crops: Vec<RgbImage> = if postprocessed {
        result
            .crops
            .par_iter()
            .zip(&source_crops)
            .enumerate()
            .map(|(i, (edited, source))| {
                let local = roi.boxes[i].relative_to(&roi.crops[i]);
                let seg = segmenter_for(&cfg, crop_size, local)?;
                let out = postprocess_crop(edited, source, &label, settings, seg.as_ref(), inpainter.as_ref())
                    .with_context(|| format!("frame {}: post-processing", i + 1))?;
                Ok(out.image)
            })
            .collect::<Result<_>>()?
    } else {
        result.crops.clone()
    };

    let output = frames
        .iter()
        .zip(&crops)
        .enumerate()
        .map(|(i, (f, c))| composite_back(f, roi.crops[i], c).with_context(|| format!("frame {}: compositing", i + 1)))
        .collect::<Result<Vec<_>>>()?;
    write_video(&m.out, &output)?;

    if let Some(dir) = &m.dump_frames {
        dump(dir, &crops, &result.latents, &result.stats)?;
    }
    Ok(RunSummary {
        frames: output.len(),
        latents: result.latents,
        stats: result.stats,
        postprocessed,
    })
}

/// Writes edited crops, final latents and run statistics.
fn dump(dir: &Path, crops: &[RgbImage], latents: &[LatentFrame], stats: &RunStats) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, c) in crops.iter().enumerate() {
        c.save(dir.join(format!("crop_{i:05}.png")))?;
    }
    let data: Vec<_> = latents.iter().map(|l| &l.data).collect();
    std::fs::write(dir.join("latents.json"), serde_json::to_string(&data)?)?;
    let stats = serde_json::json!({
        "frames": stats.frames,
        "denoise_steps": stats.denoise_steps,
        "inversion_ms": stats.inversion_ms,
        "frame_ms": stats.frame_ms,
        "decode_ms": stats.decode_ms,
        "anchor_sequence": stats.anchor_sequence,
        "peak_cache_bytes": stats.peak_cache_bytes,
        "max_frame_cache_bytes": stats.max_frame_cache_bytes,
    });
    std::fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
    Ok(())
}
