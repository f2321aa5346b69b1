//! Model descriptors and the on-disk weight format.
//!
//! A path descriptor names a directory containing `model.json`:
//!
//! ```json
//! { "architecture": "tiny-unet", "in_channels": 9, "weights": "weights.json" }
//! ```
//!
//! Supported architectures are `tiny-unet` and `linear`; the weight file is
//! the JSON serialization of [`TinyUnetWeights`] or of the `4 x 9` linear map.
//! Control weights live in a separate JSON file holding a [`ControlBranch`].

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::tiny_unet::ControlBranch;
use super::{DenoiserError, DenoiserHandle, LinearDenoiser, TinyUnet, TinyUnetWeights, ZeroDenoiser, INPUT_CHANNELS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelDescriptor {
    ToyZero,
    ToyLinear,
    ToyTinyUnet,
    Path(PathBuf),
}

impl FromStr for ModelDescriptor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "toy:zero" => Ok(Self::ToyZero),
            "toy:linear" => Ok(Self::ToyLinear),
            "toy:tiny-unet" => Ok(Self::ToyTinyUnet),
            other if other.starts_with("toy:") => Err(format!("unknown toy model `{other}`")),
            "" => Err("empty model descriptor".into()),
            path => Ok(Self::Path(PathBuf::from(path))),
        }
    }
}

impl fmt::Display for ModelDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ToyZero => f.write_str("toy:zero"),
            Self::ToyLinear => f.write_str("toy:linear"),
            Self::ToyTinyUnet => f.write_str("toy:tiny-unet"),
            Self::Path(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub architecture: String,
    pub in_channels: usize,
    pub weights: String,
}

pub enum StoredWeights<'a> {
    TinyUnet(&'a TinyUnetWeights),
    Linear(&'a Array2<f32>),
}

fn load_err(descriptor: &impl fmt::Display, reason: impl fmt::Display) -> DenoiserError {
    DenoiserError::Load {
        descriptor: descriptor.to_string(),
        reason: reason.to_string(),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, descriptor: &impl fmt::Display) -> Result<T, DenoiserError> {
    let text = fs::read_to_string(path).map_err(|e| load_err(descriptor, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| load_err(descriptor, format!("{}: {e}", path.display())))
}

/// Resolves a descriptor into a ready denoiser, attaching control weights when
/// given.
pub fn load_pretrained(
    descriptor: &ModelDescriptor,
    control_weights: Option<&Path>,
) -> Result<DenoiserHandle, DenoiserError> {
    let control = control_weights
        .map(|p| read_json::<ControlBranch>(p, &p.display()))
        .transpose()?;
    match descriptor {
        ModelDescriptor::ToyZero => Ok(Arc::new(ZeroDenoiser)),
        ModelDescriptor::ToyLinear => Ok(Arc::new(LinearDenoiser::default())),
        ModelDescriptor::ToyTinyUnet => {
            let mut net = TinyUnet::seeded(TinyUnetWeights::DEFAULT_SEED);
            if control.is_some() {
                net = net.with_control(control)?;
            }
            Ok(Arc::new(net))
        }
        ModelDescriptor::Path(dir) => {
            let manifest: ModelManifest = read_json(&dir.join("model.json"), descriptor)?;
            if manifest.in_channels != INPUT_CHANNELS {
                return Err(DenoiserError::ChannelMismatch {
                    expected: INPUT_CHANNELS,
                    found: manifest.in_channels,
                });
            }
            let weights_path = dir.join(&manifest.weights);
            match manifest.architecture.as_str() {
                "tiny-unet" => {
                    let w: TinyUnetWeights = read_json(&weights_path, descriptor)?;
                    let mut net = TinyUnet::from_weights(descriptor.to_string(), w)?;
                    if control.is_some() {
                        net = net.with_control(control)?;
                    }
                    Ok(Arc::new(net))
                }
                "linear" => {
                    let w: Array2<f32> = read_json(&weights_path, descriptor)?;
                    Ok(Arc::new(LinearDenoiser::from_weights(w)?))
                }
                other => Err(load_err(
                    descriptor,
                    format!("architecture `{other}` has no in-process backend"),
                )),
            }
        }
    }
}

/// Writes `model.json` and `weights.json` into `dir`.
pub fn save_pretrained(dir: &Path, weights: StoredWeights<'_>) -> Result<(), DenoiserError> {
    let io = |e: std::io::Error| load_err(&dir.display(), e);
    fs::create_dir_all(dir).map_err(io)?;
    let (architecture, body) = match weights {
        StoredWeights::TinyUnet(w) => ("tiny-unet", serde_json::to_string(w)),
        StoredWeights::Linear(w) => ("linear", serde_json::to_string(w)),
    };
    let body = body.map_err(|e| load_err(&dir.display(), e))?;
    let manifest = ModelManifest {
        architecture: architecture.into(),
        in_channels: INPUT_CHANNELS,
        weights: "weights.json".into(),
    };
    let manifest = serde_json::to_string_pretty(&manifest).map_err(|e| load_err(&dir.display(), e))?;
    fs::write(dir.join("model.json"), manifest).map_err(io)?;
    fs::write(dir.join("weights.json"), body).map_err(io)?;
    Ok(())
}
