//! Image crop <-> 4-channel latent codecs.
//!
//! Codecs here are linear maps applied independently to every 8x8 pixel block
//! (192 values, channel-major then row-major). The toy `toy:block` codec keeps
//! four orthonormal coefficients per block: the mean of each colour channel and
//! the left/right luminance difference. It reconstructs exactly every image
//! that lies in its span, including all images constant over each block, and
//! acts as an orthogonal projection on everything else.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use image::RgbImage;
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scheduler::LatentFrame;

pub const SCALE_FACTOR: usize = 8;
pub const LATENT_CHANNELS: usize = 4;
const BLOCK_LEN: usize = 3 * SCALE_FACTOR * SCALE_FACTOR;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("image {width}x{height} is not divisible by {SCALE_FACTOR}")]
    Indivisible { width: u32, height: u32 },
    #[error("expected a {LATENT_CHANNELS}-channel latent, got {0}")]
    Channels(usize),
    #[error("failed to load codec `{descriptor}`: {reason}")]
    Load { descriptor: String, reason: String },
}

pub trait Autoencoder: Send + Sync + fmt::Debug {
    fn descriptor(&self) -> &str;

    fn scale_factor(&self) -> usize {
        SCALE_FACTOR
    }

    fn latent_channels(&self) -> usize {
        LATENT_CHANNELS
    }

    fn encode(&self, img: &RgbImage) -> Result<LatentFrame, VaeError>;

    fn decode(&self, latent: &LatentFrame) -> Result<RgbImage, VaeError>;
}

pub type VaeHandle = Arc<dyn Autoencoder>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCodecWeights {
    /// `4 x 192`.
    pub encoder: Array2<f32>,
    /// `192 x 4`.
    pub decoder: Array2<f32>,
}

#[derive(Debug, Clone)]
pub struct BlockCodec {
    descriptor: String,
    encoder: Array2<f64>,
    decoder: Array2<f64>,
}

impl BlockCodec {
    /// The orthonormal toy codec.
    pub fn toy() -> Self {
        let s = SCALE_FACTOR;
        let mut basis = Array2::<f64>::zeros((LATENT_CHANNELS, BLOCK_LEN));
        let dc = 1.0 / s as f64;
        let detail = 1.0 / (s as f64 * 3f64.sqrt());
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    let i = c * s * s + y * s + x;
                    basis[[c, i]] = dc;
                    basis[[3, i]] = if x < s / 2 { detail } else { -detail };
                }
            }
        }
        // Latents carry block means (coefficient / 8) so they stay in [0, 1].
        let encoder = &basis / s as f64;
        let decoder = basis.t().to_owned() * s as f64;
        Self {
            descriptor: "toy:block".into(),
            encoder,
            decoder,
        }
    }

    pub fn from_weights(descriptor: impl Into<String>, w: &BlockCodecWeights) -> Result<Self, VaeError> {
        let descriptor = descriptor.into();
        if w.encoder.dim() != (LATENT_CHANNELS, BLOCK_LEN) || w.decoder.dim() != (BLOCK_LEN, LATENT_CHANNELS) {
            return Err(VaeError::Load {
                descriptor,
                reason: format!(
                    "expected encoder {LATENT_CHANNELS}x{BLOCK_LEN} and decoder {BLOCK_LEN}x{LATENT_CHANNELS}"
                ),
            });
        }
        Ok(Self {
            descriptor,
            encoder: w.encoder.mapv(f64::from),
            decoder: w.decoder.mapv(f64::from),
        })
    }

    pub fn weights(&self) -> BlockCodecWeights {
        BlockCodecWeights {
            encoder: self.encoder.mapv(|v| v as f32),
            decoder: self.decoder.mapv(|v| v as f32),
        }
    }
}

impl Autoencoder for BlockCodec {
    fn descriptor(&self) -> &str {
        &self.descriptor
    }

    fn encode(&self, img: &RgbImage) -> Result<LatentFrame, VaeError> {
        let (width, height) = img.dimensions();
        let s = SCALE_FACTOR as u32;
        if width % s != 0 || height % s != 0 {
            return Err(VaeError::Indivisible { width, height });
        }
        let (bh, bw) = ((height / s) as usize, (width / s) as usize);
        let mut out = Array3::zeros((LATENT_CHANNELS, bh, bw));
        let mut block = Array1::<f64>::zeros(BLOCK_LEN);
        let s = SCALE_FACTOR;
        for by in 0..bh {
            for bx in 0..bw {
                for y in 0..s {
                    for x in 0..s {
                        let px = img.get_pixel((bx * s + x) as u32, (by * s + y) as u32);
                        for c in 0..3 {
                            block[c * s * s + y * s + x] = f64::from(px[c]) / 255.0;
                        }
                    }
                }
                let coef = self.encoder.dot(&block);
                for (k, v) in coef.iter().enumerate() {
                    out[[k, by, bx]] = *v as f32;
                }
            }
        }
        Ok(LatentFrame::new(out, 0, 0))
    }

    fn decode(&self, latent: &LatentFrame) -> Result<RgbImage, VaeError> {
        let [c, bh, bw] = latent.shape();
        if c != LATENT_CHANNELS {
            return Err(VaeError::Channels(c));
        }
        let s = SCALE_FACTOR;
        let mut img = RgbImage::new((bw * s) as u32, (bh * s) as u32);
        for by in 0..bh {
            for bx in 0..bw {
                let coef = Array1::from_shape_fn(LATENT_CHANNELS, |k| f64::from(latent.data[[k, by, bx]]));
                let block = self.decoder.dot(&coef);
                for y in 0..s {
                    for x in 0..s {
                        let px = |ch: usize| (block[ch * s * s + y * s + x] * 255.0).round().clamp(0.0, 255.0) as u8;
                        img.put_pixel(
                            (bx * s + x) as u32,
                            (by * s + y) as u32,
                            image::Rgb([px(0), px(1), px(2)]),
                        );
                    }
                }
            }
        }
        Ok(img)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VaeDescriptor {
    ToyBlock,
    Path(PathBuf),
}

impl FromStr for VaeDescriptor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "toy:block" => Ok(Self::ToyBlock),
            other if other.starts_with("toy:") => Err(format!("unknown toy codec `{other}`")),
            "" => Err("empty codec descriptor".into()),
            path => Ok(Self::Path(path.into())),
        }
    }
}

impl fmt::Display for VaeDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ToyBlock => f.write_str("toy:block"),
            Self::Path(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CodecManifest {
    architecture: String,
    weights: String,
}

/// Loads `toy:block` or a directory with `model.json`
/// (`{"architecture": "linear-block", "weights": "weights.json"}`).
pub fn load_vae(descriptor: &VaeDescriptor) -> Result<VaeHandle, VaeError> {
    let dir = match descriptor {
        VaeDescriptor::ToyBlock => return Ok(Arc::new(BlockCodec::toy())),
        VaeDescriptor::Path(dir) => dir,
    };
    let err = |reason: String| VaeError::Load {
        descriptor: descriptor.to_string(),
        reason,
    };
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| err(format!("{}: {e}", p.display())));
    let manifest: CodecManifest =
        serde_json::from_str(&read(&dir.join("model.json"))?).map_err(|e| err(e.to_string()))?;
    if manifest.architecture != "linear-block" {
        return Err(err(format!(
            "architecture `{}` has no in-process backend",
            manifest.architecture
        )));
    }
    let w: BlockCodecWeights =
        serde_json::from_str(&read(&dir.join(&manifest.weights))?).map_err(|e| err(e.to_string()))?;
    Ok(Arc::new(BlockCodec::from_weights(descriptor.to_string(), &w)?))
}

pub fn save_block_codec(dir: &Path, codec: &BlockCodec) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = CodecManifest {
        architecture: "linear-block".into(),
        weights: "weights.json".into(),
    };
    std::fs::write(dir.join("model.json"), serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(dir.join("weights.json"), serde_json::to_string(&codec.weights())?)?;
    Ok(())
}
