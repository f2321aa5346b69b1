//! The eps-prediction interface of a 9-channel inpainting denoiser.
//!
//! A denoiser receives the noisy latent, the masked-background latent and the
//! downsampled mask (concatenated in that order), the timestep, a prompt
//! embedding and an optional control image. Every self-attention layer routes
//! through an [`AttentionHook`], which is how the pipeline records a frame's
//! keys and values and injects the anchor frame's.

mod pretrained;
mod text;
mod tiny_unet;
mod toy;

pub use pretrained::{load_pretrained, save_pretrained, ModelDescriptor, ModelManifest, StoredWeights};
pub use text::{HashTextEncoder, TextEncoder};
pub use tiny_unet::{AttentionWeights, ControlBranch, TinyUnet, TinyUnetWeights};
pub use toy::{LinearDenoiser, ZeroDenoiser};

use std::fmt;
use std::sync::Arc;

use image::RgbImage;
use ndarray::{concatenate, Array2, ArrayView2, Axis};
use thiserror::Error;

use crate::attention::{multi_head_extended_attention, AnchorCache, AttentionError, CacheBuilder, KVPair};
use crate::roi::MaskPlane;
use crate::scheduler::LatentFrame;

pub const LATENT_CHANNELS: usize = 4;
pub const INPUT_CHANNELS: usize = 2 * LATENT_CHANNELS + 1;

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("invalid denoiser input: {0}")]
    Shape(String),
    #[error("guidance scale must be >= 1, got {0}")]
    Guidance(f32),
    #[error("attention hook misconfigured: {0}")]
    Hook(&'static str),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("expected a {expected}-channel inpainting model, found {found} input channels")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("failed to load model `{descriptor}`: {reason}")]
    Load { descriptor: String, reason: String },
}

/// Token embeddings of the edit prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    tokens: Array2<f32>,
    source_text: String,
}

impl PromptEmbedding {
    pub fn new(tokens: Array2<f32>, source_text: impl Into<String>) -> Result<Self, DenoiserError> {
        if tokens.nrows() == 0 || tokens.ncols() == 0 {
            return Err(DenoiserError::Shape("prompt embedding has no tokens".into()));
        }
        Ok(Self {
            tokens,
            source_text: source_text.into(),
        })
    }

    pub fn tokens(&self) -> ArrayView2<'_, f32> {
        self.tokens.view()
    }

    pub fn width(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn source_text(&self) -> &str {
        &self.source_text
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    Pose,
    Canny,
    Depth,
    Normal,
}

impl std::str::FromStr for ControlKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pose" => Ok(Self::Pose),
            "canny" => Ok(Self::Canny),
            "depth" => Ok(Self::Depth),
            "normal" => Ok(Self::Normal),
            other => Err(format!("unknown control kind `{other}`")),
        }
    }
}

impl fmt::Display for ControlKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pose => "pose",
            Self::Canny => "canny",
            Self::Depth => "depth",
            Self::Normal => "normal",
        })
    }
}

/// A per-frame spatial condition at crop resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlImage {
    pub image: RgbImage,
    pub kind: ControlKind,
}

#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a> {
    pub noisy_latent: &'a LatentFrame,
    pub masked_bg_latent: &'a LatentFrame,
    pub mask: &'a MaskPlane,
    pub timestep: u32,
    pub prompt: &'a PromptEmbedding,
    pub control: Option<&'a ControlImage>,
    pub guidance_scale: f32,
}

impl DenoiserInput<'_> {
    pub fn validate(&self) -> Result<(), DenoiserError> {
        let [c, h, w] = self.noisy_latent.shape();
        if c != LATENT_CHANNELS {
            return Err(DenoiserError::Shape(format!(
                "noisy latent has {c} channels, expected {LATENT_CHANNELS}"
            )));
        }
        if self.masked_bg_latent.shape() != [c, h, w] {
            return Err(DenoiserError::Shape(format!(
                "masked background latent {:?} does not match noisy latent {:?}",
                self.masked_bg_latent.shape(),
                [c, h, w]
            )));
        }
        if self.mask.dims() != (h, w) {
            return Err(DenoiserError::Shape(format!(
                "mask {:?} does not match latent plane {:?}",
                self.mask.dims(),
                (h, w)
            )));
        }
        if self.guidance_scale.is_nan() || self.guidance_scale < 1.0 {
            return Err(DenoiserError::Guidance(self.guidance_scale));
        }
        Ok(())
    }

    /// The 9-channel stack `noisy ‖ masked_bg ‖ mask`.
    pub fn stacked_channels(&self) -> ndarray::Array3<f32> {
        let mask = self.mask.data.view().insert_axis(Axis(0));
        concatenate(
            Axis(0),
            &[self.noisy_latent.data.view(), self.masked_bg_latent.data.view(), mask],
        )
        .expect("validated shapes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookMode {
    SelfOnly,
    AnchorExtended,
    Record,
}

/// Routes self-attention layers of one denoiser call.
///
/// `Record` and `AnchorExtended` both push the frame's own keys and values
/// into the recorder when one is attached.
pub struct AttentionHook<'a> {
    mode: HookMode,
    anchor: Option<&'a AnchorCache>,
    recorder: Option<&'a mut CacheBuilder>,
}

impl<'a> AttentionHook<'a> {
    pub fn self_only() -> Self {
        Self {
            mode: HookMode::SelfOnly,
            anchor: None,
            recorder: None,
        }
    }

    pub fn record(recorder: &'a mut CacheBuilder) -> Self {
        Self {
            mode: HookMode::Record,
            anchor: None,
            recorder: Some(recorder),
        }
    }

    pub fn anchor_extended(anchor: &'a AnchorCache, recorder: Option<&'a mut CacheBuilder>) -> Self {
        Self {
            mode: HookMode::AnchorExtended,
            anchor: Some(anchor),
            recorder,
        }
    }

    pub fn mode(&self) -> HookMode {
        self.mode
    }

    pub fn anchor(&self) -> Option<&'a AnchorCache> {
        self.anchor
    }

    pub fn is_recording(&self) -> bool {
        self.recorder.is_some()
    }

    /// Same attention routing, never recording.
    pub fn without_recorder(&self) -> AttentionHook<'a> {
        match (self.mode, self.anchor) {
            (HookMode::AnchorExtended, Some(anchor)) => AttentionHook::anchor_extended(anchor, None),
            _ => AttentionHook::self_only(),
        }
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        match (self.mode, self.anchor.is_some(), self.recorder.is_some()) {
            (HookMode::AnchorExtended, false, _) => {
                Err(DenoiserError::Hook("anchor_extended mode requires an anchor cache"))
            }
            (HookMode::SelfOnly | HookMode::Record, true, _) => Err(DenoiserError::Hook(
                "an anchor cache is only valid in anchor_extended mode",
            )),
            (HookMode::Record, _, false) => Err(DenoiserError::Hook("record mode requires a recorder")),
            _ => Ok(()),
        }
    }

    /// Runs self-attention layer `layer` at timestep `t` on token-major
    /// queries, keys and values of width `heads * head_dim`.
    pub fn self_attention(
        &mut self,
        layer: usize,
        timestep: u32,
        q: ArrayView2<f32>,
        k: Array2<f32>,
        v: Array2<f32>,
        heads: usize,
    ) -> Result<Array2<f32>, DenoiserError> {
        let own = KVPair::new(k, v, layer, timestep)?;
        let anchor = match (self.mode, self.anchor) {
            (HookMode::AnchorExtended, Some(cache)) => Some(cache.load(layer, timestep)?),
            _ => None,
        };
        let out = multi_head_extended_attention(q, &own, anchor.as_deref(), heads)?;
        if let Some(rec) = self.recorder.as_deref_mut() {
            rec.store(own)?;
        }
        Ok(out)
    }
}

pub trait Denoiser: Send + Sync + fmt::Debug {
    fn descriptor(&self) -> &str;

    fn self_attention_layers(&self) -> usize;

    fn heads(&self) -> usize {
        1
    }

    /// Prompt token width the model expects, when it reads the prompt at all.
    fn text_width(&self) -> Option<usize> {
        None
    }

    /// Raw single-branch noise prediction. Callers go through [`predict_eps`].
    fn forward_eps(
        &self,
        input: &DenoiserInput<'_>,
        hook: &mut AttentionHook<'_>,
    ) -> Result<LatentFrame, DenoiserError>;
}

pub type DenoiserHandle = Arc<dyn Denoiser>;

/// Validates input and hook, then predicts the noise for one branch.
pub fn predict_eps(
    handle: &DenoiserHandle,
    input: &DenoiserInput<'_>,
    hook: &mut AttentionHook<'_>,
) -> Result<LatentFrame, DenoiserError> {
    input.validate()?;
    hook.validate()?;
    let eps = handle.forward_eps(input, hook)?;
    if eps.shape() != input.noisy_latent.shape() {
        return Err(DenoiserError::Shape(format!(
            "denoiser returned {:?} for a {:?} latent",
            eps.shape(),
            input.noisy_latent.shape()
        )));
    }
    Ok(LatentFrame::new(eps.data, input.noisy_latent.frame, input.timestep))
}

/// `eps_uncond + scale * (eps_cond - eps_uncond)`.
pub fn classifier_free_guide(
    eps_cond: &LatentFrame,
    eps_uncond: &LatentFrame,
    scale: f32,
) -> Result<LatentFrame, DenoiserError> {
    if scale.is_nan() || scale < 1.0 {
        return Err(DenoiserError::Guidance(scale));
    }
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(DenoiserError::Shape(format!(
            "guidance branches differ: {:?} vs {:?}",
            eps_cond.shape(),
            eps_uncond.shape()
        )));
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    let mut data = eps_uncond.data.clone();
    ndarray::Zip::from(&mut data)
        .and(&eps_cond.data)
        .for_each(|u, &c| *u += scale * (c - *u));
    Ok(LatentFrame::new(data, eps_cond.frame, eps_cond.timestep))
}

/// Classifier-free guided prediction. Only the conditional branch records;
/// both branches see the anchor.
pub fn predict_guided_eps(
    handle: &DenoiserHandle,
    input: &DenoiserInput<'_>,
    uncond_prompt: &PromptEmbedding,
    hook: &mut AttentionHook<'_>,
) -> Result<LatentFrame, DenoiserError> {
    if input.guidance_scale == 1.0 {
        return predict_eps(handle, input, hook);
    }
    let mut uncond_hook = hook.without_recorder();
    let uncond_input = DenoiserInput {
        prompt: uncond_prompt,
        ..*input
    };
    let (cond, uncond) = rayon::join(
        || predict_eps(handle, input, hook),
        || predict_eps(handle, &uncond_input, &mut uncond_hook),
    );
    classifier_free_guide(&cond?, &uncond?, input.guidance_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rand_latent(seed: u64) -> LatentFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentFrame::new(
            Array3::from_shape_simple_fn((4, 3, 3), || StandardNormal.sample(&mut rng)),
            1,
            5,
        )
    }

    #[test]
    fn guidance_scale_one_is_conditional() {
        let (c, u) = (rand_latent(1), rand_latent(2));
        assert_eq!(classifier_free_guide(&c, &u, 1.0).unwrap().data, c.data);
    }

    #[test]
    fn equal_branches_are_fixed_points() {
        let c = rand_latent(3);
        for s in [1.0, 2.0, 7.5, 20.0] {
            assert_eq!(classifier_free_guide(&c, &c, s).unwrap().data, c.data);
        }
    }

    #[test]
    fn guidance_matches_direct_formula() {
        let (c, u) = (rand_latent(4), rand_latent(5));
        let g = classifier_free_guide(&c, &u, 7.5).unwrap();
        for ((o, cv), uv) in g.data.iter().zip(c.data.iter()).zip(u.data.iter()) {
            let direct = f64::from(*uv) + 7.5 * (f64::from(*cv) - f64::from(*uv));
            assert!((f64::from(*o) - direct).abs() < 1e-5);
        }
    }

    #[test]
    fn guidance_errors() {
        let c = rand_latent(6);
        assert!(matches!(
            classifier_free_guide(&c, &c, 0.5),
            Err(DenoiserError::Guidance(_))
        ));
        let other = LatentFrame::zeros([4, 2, 2], 1, 0);
        assert!(classifier_free_guide(&c, &other, 2.0).is_err());
    }

    #[test]
    fn hook_validation() {
        let mut rec = CacheBuilder::new(1, 1, vec![1]);
        assert!(AttentionHook::self_only().validate().is_ok());
        assert!(AttentionHook::record(&mut rec).validate().is_ok());
        let bad = AttentionHook {
            mode: HookMode::AnchorExtended,
            anchor: None,
            recorder: None,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn input_shape_checks() {
        let z = rand_latent(7);
        let small = LatentFrame::zeros([4, 2, 2], 1, 0);
        let mask = MaskPlane::zeros(3, 3, 1);
        let prompt = PromptEmbedding::new(Array2::ones((1, 4)), "x").unwrap();
        let mut input = DenoiserInput {
            noisy_latent: &z,
            masked_bg_latent: &z,
            mask: &mask,
            timestep: 1,
            prompt: &prompt,
            control: None,
            guidance_scale: 1.0,
        };
        assert!(input.validate().is_ok());
        assert_eq!(input.stacked_channels().dim(), (9, 3, 3));
        input.masked_bg_latent = &small;
        assert!(input.validate().is_err());
        input.masked_bg_latent = &z;
        let bad_mask = MaskPlane::zeros(2, 3, 1);
        input.mask = &bad_mask;
        assert!(input.validate().is_err());
        assert!(PromptEmbedding::new(Array2::zeros((0, 4)), "").is_err());
    }
}
