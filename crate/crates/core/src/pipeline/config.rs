//! Run configuration as flat `key = value` text.
//!
//! Blank lines and `#` comments are ignored. Every key may be overridden by an
//! environment variable named `INVI_` followed by the upper-cased key, e.g.
//! `INVI_STEPS_INFER=20`. Unknown keys are rejected.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::denoiser::{ControlKind, ModelDescriptor};
use crate::scheduler::BetaSpacing;
use crate::vae::VaeDescriptor;

pub const ENV_PREFIX: &str = "INVI_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Invi,
    PerFrame,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "invi" => Ok(Self::Invi),
            "per_frame" | "per-frame" | "per_frame_baseline" => Ok(Self::PerFrame),
            other => Err(format!("unknown mode `{other}` (invi, per_frame)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Invi => "invi",
            Self::PerFrame => "per_frame",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditConfig {
    pub prompt: String,
    pub negative_prompt: String,
    pub control_kind: ControlKind,
    pub steps_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub spacing: BetaSpacing,
    pub steps_infer: usize,
    pub guidance_scale: f32,
    pub seed: u64,
    pub crop_w: u32,
    pub crop_h: u32,
    pub margin: f64,
    pub denoiser: ModelDescriptor,
    pub control_weights: Option<PathBuf>,
    pub vae: VaeDescriptor,
    pub mode: Mode,
    pub latent_blend: bool,
    pub inversion_conditional: bool,
    pub inversion_refine_iters: usize,
    pub cache_spill_dir: Option<PathBuf>,
    pub postprocess: bool,
    /// Pixels; `None` means 3% of the crop width.
    pub dilation_radius: Option<u32>,
    pub mask_threshold: f32,
    /// Segmenter query; `None` means the class noun of the prompt.
    pub label: Option<String>,
    pub segmenter_cmd: Option<String>,
    pub inpainter_cmd: Option<String>,
    pub client_timeout_ms: u64,
    pub client_retries: u32,
    pub embedder: String,
    pub lpips_model: String,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            negative_prompt: String::new(),
            control_kind: ControlKind::Pose,
            steps_train: 1000,
            beta_start: 0.000_85,
            beta_end: 0.012,
            spacing: BetaSpacing::ScaledLinear,
            steps_infer: 50,
            guidance_scale: 7.5,
            seed: 0,
            crop_w: 512,
            crop_h: 512,
            margin: 0.25,
            denoiser: ModelDescriptor::ToyTinyUnet,
            control_weights: None,
            vae: VaeDescriptor::ToyBlock,
            mode: Mode::Invi,
            latent_blend: false,
            inversion_conditional: false,
            inversion_refine_iters: 3,
            cache_spill_dir: None,
            postprocess: true,
            dilation_radius: None,
            mask_threshold: 0.5,
            label: None,
            segmenter_cmd: None,
            inpainter_cmd: None,
            client_timeout_ms: 30_000,
            client_retries: 2,
            embedder: "stub".into(),
            lpips_model: "stub".into(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "prompt",
    "negative_prompt",
    "control_kind",
    "steps_train",
    "beta_start",
    "beta_end",
    "spacing",
    "steps_infer",
    "guidance_scale",
    "seed",
    "crop_w",
    "crop_h",
    "margin",
    "denoiser",
    "control_weights",
    "vae",
    "mode",
    "latent_blend",
    "inversion_conditional",
    "inversion_refine_iters",
    "cache_spill_dir",
    "postprocess",
    "dilation_radius",
    "mask_threshold",
    "label",
    "segmenter_cmd",
    "inpainter_cmd",
    "client_timeout_ms",
    "client_retries",
    "embedder",
    "lpips_model",
];

fn parse<T>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T: FromStr,
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: "expected a boolean".into(),
        }),
    }
}

fn optional(value: &str) -> Option<String> {
    (!value.is_empty() && value != "none").then(|| value.to_string())
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

impl EditConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = unquote(value.trim());
        match key {
            "prompt" => self.prompt = v.into(),
            "negative_prompt" => self.negative_prompt = v.into(),
            "control_kind" => self.control_kind = parse(key, v)?,
            "steps_train" => self.steps_train = parse(key, v)?,
            "beta_start" => self.beta_start = parse(key, v)?,
            "beta_end" => self.beta_end = parse(key, v)?,
            "spacing" => self.spacing = parse(key, v)?,
            "steps_infer" => self.steps_infer = parse(key, v)?,
            "guidance_scale" => self.guidance_scale = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "crop_w" => self.crop_w = parse(key, v)?,
            "crop_h" => self.crop_h = parse(key, v)?,
            "margin" => self.margin = parse(key, v)?,
            "denoiser" => self.denoiser = parse(key, v)?,
            "control_weights" => self.control_weights = optional(v).map(PathBuf::from),
            "vae" => self.vae = parse(key, v)?,
            "mode" => self.mode = parse(key, v)?,
            "latent_blend" => self.latent_blend = parse_bool(key, v)?,
            "inversion_conditional" => self.inversion_conditional = parse_bool(key, v)?,
            "inversion_refine_iters" => self.inversion_refine_iters = parse(key, v)?,
            "cache_spill_dir" => self.cache_spill_dir = optional(v).map(PathBuf::from),
            "postprocess" => self.postprocess = parse_bool(key, v)?,
            "dilation_radius" => self.dilation_radius = optional(v).map(|r| parse(key, &r)).transpose()?,
            "mask_threshold" => self.mask_threshold = parse(key, v)?,
            "label" => self.label = optional(v),
            "segmenter_cmd" => self.segmenter_cmd = optional(v),
            "inpainter_cmd" => self.inpainter_cmd = optional(v),
            "client_timeout_ms" => self.client_timeout_ms = parse(key, v)?,
            "client_retries" => self.client_retries = parse(key, v)?,
            "embedder" => self.embedder = v.into(),
            "lpips_model" => self.lpips_model = v.into(),
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let opt_s = |s: &Option<String>| s.clone().unwrap_or_else(|| "none".into());
        Some(match key {
            "prompt" => self.prompt.clone(),
            "negative_prompt" => self.negative_prompt.clone(),
            "control_kind" => self.control_kind.to_string(),
            "steps_train" => self.steps_train.to_string(),
            "beta_start" => self.beta_start.to_string(),
            "beta_end" => self.beta_end.to_string(),
            "spacing" => match self.spacing {
                BetaSpacing::Linear => "linear".into(),
                BetaSpacing::ScaledLinear => "scaled_linear".into(),
            },
            "steps_infer" => self.steps_infer.to_string(),
            "guidance_scale" => self.guidance_scale.to_string(),
            "seed" => self.seed.to_string(),
            "crop_w" => self.crop_w.to_string(),
            "crop_h" => self.crop_h.to_string(),
            "margin" => self.margin.to_string(),
            "denoiser" => self.denoiser.to_string(),
            "control_weights" => opt(&self.control_weights),
            "vae" => self.vae.to_string(),
            "mode" => self.mode.to_string(),
            "latent_blend" => self.latent_blend.to_string(),
            "inversion_conditional" => self.inversion_conditional.to_string(),
            "inversion_refine_iters" => self.inversion_refine_iters.to_string(),
            "cache_spill_dir" => opt(&self.cache_spill_dir),
            "postprocess" => self.postprocess.to_string(),
            "dilation_radius" => self.dilation_radius.map_or("none".into(), |r| r.to_string()),
            "mask_threshold" => self.mask_threshold.to_string(),
            "label" => opt_s(&self.label),
            "segmenter_cmd" => opt_s(&self.segmenter_cmd),
            "inpainter_cmd" => opt_s(&self.inpainter_cmd),
            "client_timeout_ms" => self.client_timeout_ms.to_string(),
            "client_retries" => self.client_retries.to_string(),
            "embedder" => self.embedder.clone(),
            "lpips_model" => self.lpips_model.clone(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn merge_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        Self::from_text(&text)
    }

    /// Applies `INVI_*` overrides from an explicit variable list.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            if let Some(key) = k.as_ref().strip_prefix(ENV_PREFIX) {
                let key = key.to_ascii_lowercase();
                if KEYS.contains(&key.as_str()) {
                    self.set(&key, v.as_ref())?;
                }
            }
        }
        Ok(())
    }

    /// Applies overrides from the process environment.
    pub fn apply_process_env(&mut self) -> Result<(), ConfigError> {
        self.apply_env(std::env::vars())
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.steps_infer == 0 {
            return bad("steps_infer must be at least 1");
        }
        if self.steps_infer > self.steps_train {
            return bad("steps_infer cannot exceed steps_train");
        }
        if self.guidance_scale.is_nan() || self.guidance_scale < 1.0 {
            return bad("guidance_scale must be at least 1");
        }
        if self.crop_w == 0 || self.crop_h == 0 || !self.crop_w.is_multiple_of(8) || !self.crop_h.is_multiple_of(8) {
            return bad("crop_w and crop_h must be positive multiples of 8");
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            return bad("margin must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return bad("mask_threshold must lie in [0, 1]");
        }
        Ok(())
    }

    /// The configured dilation radius, or 3% of the crop width.
    pub fn effective_dilation_radius(&self) -> u32 {
        self.dilation_radius
            .unwrap_or_else(|| (f64::from(self.crop_w) * 0.03).round() as u32)
    }

    /// The configured label, or the class noun guessed from the prompt.
    pub fn effective_label(&self) -> String {
        self.label.clone().unwrap_or_else(|| class_noun(&self.prompt))
    }
}

const TRAILING: &[&str] = &[
    "in", "on", "at", "with", "near", "under", "over", "by", "walking", "running", "sitting", "standing", "driving",
    "flying", "swimming", "jumping", "dancing", "playing", "holding", "wearing",
];

/// Last word of the prompt's head noun phrase: text after the final article
/// of the first clause, cut at the first preposition or verb.
pub fn class_noun(prompt: &str) -> String {
    let clause = prompt.split([',', '.', ';']).next().unwrap_or("");
    let words: Vec<String> = clause
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_ascii_lowercase())
        .filter(|w| !w.is_empty())
        .collect();
    let head: Vec<&String> = words.iter().take_while(|w| !TRAILING.contains(&w.as_str())).collect();
    let pick = if head.is_empty() { words.iter().collect() } else { head };
    pick.last().map_or_else(|| "object".to_string(), |w| w.to_string())
}
