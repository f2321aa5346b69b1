//! Edit-quality metrics: prompt alignment, temporal consistency, background
//! preservation and perceptual frame-to-frame distance.
//!
//! Embedding and perceptual models are injected; the stubs here are
//! deterministic stand-ins for tests and offline runs. Back-L1 is measured in
//! 8-bit intensity units.

use std::sync::Arc;

use image::RgbImage;
use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::postprocess::BinaryMask;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{metric} needs at least {need} frames, got {got}")]
    TooFewFrames {
        metric: &'static str,
        need: usize,
        got: usize,
    },
    #[error("frame {frame}: {reason}")]
    Misaligned { frame: usize, reason: String },
    #[error("embedder: {0}")]
    Embedder(String),
    #[error("unknown model descriptor `{0}`")]
    UnknownModel(String),
}

pub trait Embedder: Send + Sync {
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f32>, MetricsError>;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, MetricsError>;
}

pub trait PerceptualDistance: Send + Sync {
    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64, MetricsError>;
}

/// Image: normalized 8-bin histogram per channel. Text: a SHA-256 seeded
/// Gaussian vector of the same width.
#[derive(Debug, Clone, Copy, Default)]
pub struct HistogramEmbedder;

const BINS: usize = 8;

impl Embedder for HistogramEmbedder {
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f32>, MetricsError> {
        let mut h = vec![0f32; 3 * BINS];
        for px in image.pixels() {
            for c in 0..3 {
                h[c * BINS + usize::from(px[c]) * BINS / 256] += 1.0;
            }
        }
        let n = (image.width() * image.height()).max(1) as f32;
        h.iter_mut().for_each(|v| *v /= n);
        Ok(h)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, MetricsError> {
        let seed: [u8; 32] = Sha256::digest(text.trim().to_lowercase().as_bytes()).into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        Ok((0..3 * BINS).map(|_| StandardNormal.sample(&mut rng)).collect())
    }
}

/// Mean absolute pixel difference scaled to `[0, 1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanAbsDistance;

impl PerceptualDistance for MeanAbsDistance {
    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64, MetricsError> {
        if a.dimensions() != b.dimensions() {
            return Err(MetricsError::Embedder("frame sizes differ".into()));
        }
        let sum: u64 = a
            .as_raw()
            .iter()
            .zip(b.as_raw())
            .map(|(x, y)| u64::from(x.abs_diff(*y)))
            .sum();
        Ok(sum as f64 / (a.as_raw().len().max(1) as f64 * 255.0))
    }
}

/// `"stub"` or `"none"`.
pub fn embedder_from_descriptor(d: &str) -> Result<Option<Arc<dyn Embedder>>, MetricsError> {
    match d {
        "stub" => Ok(Some(Arc::new(HistogramEmbedder))),
        "none" | "" => Ok(None),
        other => Err(MetricsError::UnknownModel(other.into())),
    }
}

/// `"stub"` or `"none"`.
pub fn lpips_from_descriptor(d: &str) -> Result<Option<Arc<dyn PerceptualDistance>>, MetricsError> {
    match d {
        "stub" => Ok(Some(Arc::new(MeanAbsDistance))),
        "none" | "" => Ok(None),
        other => Err(MetricsError::UnknownModel(other.into())),
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn need(metric: &'static str, need: usize, got: usize) -> Result<(), MetricsError> {
    if got < need {
        Err(MetricsError::TooFewFrames { metric, need, got })
    } else {
        Ok(())
    }
}

fn embed_all(frames: &[RgbImage], embedder: &dyn Embedder) -> Result<Vec<Vec<f32>>, MetricsError> {
    frames.par_iter().map(|f| embedder.embed_image(f)).collect()
}

/// Mean cosine similarity between each frame and the prompt.
pub fn clip_text_score(frames: &[RgbImage], prompt: &str, embedder: &dyn Embedder) -> Result<f64, MetricsError> {
    need("clip_text", 1, frames.len())?;
    let text = embedder.embed_text(prompt)?;
    let e = embed_all(frames, embedder)?;
    Ok(e.iter().map(|v| cosine(v, &text)).sum::<f64>() / e.len() as f64)
}

/// Mean cosine similarity of consecutive frames.
pub fn clip_temp_score(frames: &[RgbImage], embedder: &dyn Embedder) -> Result<f64, MetricsError> {
    need("clip_temp", 2, frames.len())?;
    let e = embed_all(frames, embedder)?;
    let sum: f64 = e.par_windows(2).map(|w| cosine(&w[0], &w[1])).sum();
    Ok(sum / (e.len() - 1) as f64)
}

/// Sum of absolute channel differences over masked pixels, and the number of
/// masked channel values.
fn masked_abs_diff(frame: usize, a: &RgbImage, b: &RgbImage, mask: &BinaryMask) -> Result<(f64, usize), MetricsError> {
    if a.dimensions() != b.dimensions() || a.dimensions() != mask.dimensions() {
        return Err(MetricsError::Misaligned {
            frame,
            reason: format!(
                "sizes {:?}, {:?} and mask {:?}",
                a.dimensions(),
                b.dimensions(),
                mask.dimensions()
            ),
        });
    }
    let mut sum = 0u64;
    let mut n = 0usize;
    for (x, y, pa) in a.enumerate_pixels() {
        if mask.get(x, y) {
            let pb = b.get_pixel(x, y);
            sum += (0..3).map(|c| u64::from(pa[c].abs_diff(pb[c]))).sum::<u64>();
            n += 3;
        }
    }
    Ok((sum as f64, n))
}

/// Per-frame mean `|a - b|` over background pixels, averaged over frames
/// whose mask is nonempty.
pub fn back_l1(original: &[RgbImage], edited: &[RgbImage], masks: &[BinaryMask]) -> Result<f64, MetricsError> {
    if original.len() != edited.len() || original.len() != masks.len() {
        return Err(MetricsError::Misaligned {
            frame: original.len().min(edited.len()).min(masks.len()) + 1,
            reason: format!(
                "{} original, {} edited, {} masks",
                original.len(),
                edited.len(),
                masks.len()
            ),
        });
    }
    need("back_l1", 1, original.len())?;
    let per_frame = original
        .par_iter()
        .zip(edited)
        .zip(masks)
        .enumerate()
        .map(|(i, ((a, b), m))| masked_abs_diff(i + 1, a, b, m))
        .collect::<Result<Vec<_>, _>>()?;
    let means: Vec<f64> = per_frame
        .iter()
        .filter(|(_, n)| *n > 0)
        .map(|(s, n)| s / *n as f64)
        .collect();
    if means.is_empty() {
        return Ok(0.0);
    }
    Ok(means.iter().sum::<f64>() / means.len() as f64)
}

/// Mean perceptual distance of consecutive frames.
pub fn lpips_consecutive(frames: &[RgbImage], model: &dyn PerceptualDistance) -> Result<f64, MetricsError> {
    need("lpips", 2, frames.len())?;
    let d = frames
        .par_windows(2)
        .map(|w| model.distance(&w[0], &w[1]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Streaming form of the metrics; feed frames in order, in any chunking.
pub struct MetricsAccumulator<'a> {
    embedder: Option<&'a dyn Embedder>,
    lpips: Option<&'a dyn PerceptualDistance>,
    text: Option<Vec<f32>>,
    frames: usize,
    text_sum: f64,
    temp_sum: f64,
    prev_embedding: Option<Vec<f32>>,
    prev_frame: Option<RgbImage>,
    lpips_sum: f64,
    back_sum: f64,
    back_frames: usize,
    masked_frames: usize,
}

impl<'a> MetricsAccumulator<'a> {
    pub fn new(
        prompt: Option<&str>,
        embedder: Option<&'a dyn Embedder>,
        lpips: Option<&'a dyn PerceptualDistance>,
    ) -> Result<Self, MetricsError> {
        let text = match (prompt, embedder) {
            (Some(p), Some(e)) => Some(e.embed_text(p)?),
            _ => None,
        };
        Ok(Self {
            embedder,
            lpips,
            text,
            frames: 0,
            text_sum: 0.0,
            temp_sum: 0.0,
            prev_embedding: None,
            prev_frame: None,
            lpips_sum: 0.0,
            back_sum: 0.0,
            back_frames: 0,
            masked_frames: 0,
        })
    }

    /// Adds one edited frame, with its original and background mask when
    /// Back-L1 is wanted.
    pub fn push(&mut self, edited: &RgbImage, reference: Option<(&RgbImage, &BinaryMask)>) -> Result<(), MetricsError> {
        self.frames += 1;
        if let Some(e) = self.embedder {
            let v = e.embed_image(edited)?;
            if let Some(t) = &self.text {
                self.text_sum += cosine(&v, t);
            }
            if let Some(p) = &self.prev_embedding {
                self.temp_sum += cosine(p, &v);
            }
            self.prev_embedding = Some(v);
        }
        if let Some(model) = self.lpips {
            if let Some(p) = &self.prev_frame {
                self.lpips_sum += model.distance(p, edited)?;
            }
            self.prev_frame = Some(edited.clone());
        }
        if let Some((orig, mask)) = reference {
            self.masked_frames += 1;
            let (s, n) = masked_abs_diff(self.frames, orig, edited, mask)?;
            if n > 0 {
                self.back_sum += s / n as f64;
                self.back_frames += 1;
            }
        }
        Ok(())
    }

    pub fn push_chunk(
        &mut self,
        edited: &[RgbImage],
        reference: Option<(&[RgbImage], &[BinaryMask])>,
    ) -> Result<(), MetricsError> {
        for (i, f) in edited.iter().enumerate() {
            self.push(f, reference.map(|(o, m)| (&o[i], &m[i])))?;
        }
        Ok(())
    }

    pub fn finish(self) -> MetricsReport {
        let n = self.frames;
        let pairs = n.saturating_sub(1);
        MetricsReport {
            frames: n,
            clip_text: (self.text.is_some() && n > 0).then(|| self.text_sum / n as f64),
            clip_temp: (self.embedder.is_some() && pairs > 0).then(|| self.temp_sum / pairs as f64),
            back_l1: (self.masked_frames > 0).then(|| {
                if self.back_frames == 0 {
                    0.0
                } else {
                    self.back_sum / self.back_frames as f64
                }
            }),
            lpips: (self.lpips.is_some() && pairs > 0).then(|| self.lpips_sum / pairs as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub frames: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_text: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_temp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub back_l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
}

impl MetricsReport {
    /// One `key: value` line per present metric.
    pub fn to_text(&self) -> String {
        let mut out = format!("frames: {}\n", self.frames);
        for (k, v) in [
            ("clip_text", self.clip_text),
            ("clip_temp", self.clip_temp),
            ("back_l1", self.back_l1),
            ("lpips", self.lpips),
        ] {
            if let Some(v) = v {
                out.push_str(&format!("{k}: {v:.6}\n"));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Whole-video evaluation. Missing inputs omit the matching metric.
pub fn evaluate(
    original: Option<&[RgbImage]>,
    edited: &[RgbImage],
    masks: Option<&[BinaryMask]>,
    prompt: Option<&str>,
    embedder: Option<&dyn Embedder>,
    lpips: Option<&dyn PerceptualDistance>,
) -> Result<MetricsReport, MetricsError> {
    need("evaluation", 1, edited.len())?;
    let back_l1 = match (original, masks) {
        (Some(o), Some(m)) => Some(back_l1(o, edited, m)?),
        _ => None,
    };
    let clip_text = match (prompt, embedder) {
        (Some(p), Some(e)) => Some(clip_text_score(edited, p, e)?),
        _ => None,
    };
    let clip_temp = match embedder {
        Some(e) if edited.len() >= 2 => Some(clip_temp_score(edited, e)?),
        _ => None,
    };
    let lpips = match lpips {
        Some(m) if edited.len() >= 2 => Some(lpips_consecutive(edited, m)?),
        None => {
            warn!("no perceptual model configured; lpips omitted");
            None
        }
        _ => None,
    };
    Ok(MetricsReport {
        frames: edited.len(),
        clip_text,
        clip_temp,
        back_l1,
        lpips,
    })
}
