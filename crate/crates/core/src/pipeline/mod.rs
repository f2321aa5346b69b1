//! Frame-by-frame edit loop.
//!
//! Background crops are inverted to noisy trajectories. Frame 1 is inpainted
//! from its own trajectory while its self-attention keys and values are
//! recorded. Every later frame attends to the previous frame's recording and
//! records its own, which then replaces the anchor. Frame numbers are 1-based.

pub mod config;

use std::time::Instant;

use image::RgbImage;
use log::{debug, info};
use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

pub use config::{ConfigError, EditConfig, Mode};

use crate::attention::{cache_promote, AnchorCache, AttentionError, CacheBuilder};
use crate::denoiser::{
    load_pretrained, predict_guided_eps, AttentionHook, ControlImage, DenoiserError, DenoiserHandle, DenoiserInput,
    HashTextEncoder, PromptEmbedding, TextEncoder,
};
use crate::roi::MaskPlane;
use crate::scheduler::{
    ddim_invert_trajectory, ddim_step, InversionOptions, LatentFrame, LatentTrajectory, NoiseSchedule, ScheduleError,
    TrajectoryRow,
};
use crate::vae::{load_vae, VaeError, VaeHandle};

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Vae(#[from] VaeError),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("frame {frame}: {stage} failed: {source}")]
    Frame {
        frame: usize,
        stage: &'static str,
        #[source]
        source: StageError,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("loading models: {0}")]
    Load(String),
}

impl PipelineError {
    /// The 1-based frame a stage failure belongs to.
    pub fn frame(&self) -> Option<usize> {
        match self {
            Self::Frame { frame, .. } => Some(*frame),
            _ => None,
        }
    }
}

fn at_frame<E: Into<StageError>>(frame: usize, stage: &'static str) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Frame {
        frame,
        stage,
        source: e.into(),
    }
}

/// Per-frame conditioning, already cropped and encoded.
#[derive(Debug, Clone)]
pub struct FrameInputs {
    pub bg_latent: LatentFrame,
    pub masked_bg_latent: LatentFrame,
    pub mask: MaskPlane,
    pub control: Option<ControlImage>,
}

/// What the run loop reports after each frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameEvent {
    pub frame: usize,
    /// Frame whose features were attended to, if any.
    pub anchor_frame: Option<usize>,
    /// Entries recorded for this frame and whether they cover every layer and step.
    pub recorded_entries: usize,
    pub expected_entries: usize,
    pub cache_complete: bool,
    /// Bytes of this frame's own keys and values.
    pub frame_cache_bytes: usize,
    /// Anchor plus in-flight recording, in memory, before promotion.
    pub resident_cache_bytes: usize,
}

pub trait RunObserver {
    fn on_frame(&mut self, event: &FrameEvent);
}

/// Observer that keeps every event.
#[derive(Debug, Default, Clone)]
pub struct EventLog {
    pub events: Vec<FrameEvent>,
}

impl RunObserver for EventLog {
    fn on_frame(&mut self, event: &FrameEvent) {
        self.events.push(event.clone());
    }
}

impl RunObserver for () {
    fn on_frame(&mut self, _: &FrameEvent) {}
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    pub frames: usize,
    pub denoise_steps: usize,
    pub inversion_ms: f64,
    pub frame_ms: Vec<f64>,
    pub decode_ms: f64,
    pub anchor_sequence: Vec<usize>,
    pub peak_cache_bytes: usize,
    pub max_frame_cache_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct EditResult {
    /// Final clean latents, one per frame.
    pub latents: Vec<LatentFrame>,
    pub crops: Vec<RgbImage>,
    pub stats: RunStats,
}

/// Loaded models plus everything derived once per run.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: EditConfig,
    pub denoiser: DenoiserHandle,
    pub vae: VaeHandle,
    pub sched: NoiseSchedule,
    timesteps: Vec<u32>,
    cond: PromptEmbedding,
    uncond: PromptEmbedding,
}

impl Pipeline {
    /// Builds the schedule and prompt embeddings around supplied models.
    pub fn new(
        cfg: EditConfig,
        denoiser: DenoiserHandle,
        vae: VaeHandle,
        text: &dyn TextEncoder,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let sched = NoiseSchedule::new(cfg.steps_train, cfg.beta_start, cfg.beta_end, cfg.spacing)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let timesteps = sched
            .inference_timesteps(cfg.steps_infer)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let cond = text.encode(&cfg.prompt);
        let uncond = text.encode(&cfg.negative_prompt);
        if let Some(w) = denoiser.text_width() {
            if w != text.width() {
                return Err(PipelineError::Load(format!(
                    "text encoder width {} does not match denoiser width {w}",
                    text.width()
                )));
            }
        }
        Ok(Self {
            cfg,
            denoiser,
            vae,
            sched,
            timesteps,
            cond,
            uncond,
        })
    }

    /// Resolves model descriptors from the config and uses the hashing text encoder.
    pub fn from_config(cfg: EditConfig) -> Result<Self, PipelineError> {
        let denoiser = load_pretrained(&cfg.denoiser, cfg.control_weights.as_deref())
            .map_err(|e| PipelineError::Load(e.to_string()))?;
        let vae = load_vae(&cfg.vae).map_err(|e| PipelineError::Load(e.to_string()))?;
        let width = denoiser.text_width().unwrap_or(8);
        let text = HashTextEncoder::new(width, 16);
        Self::new(cfg, denoiser, vae, &text)
    }

    /// Ascending inference timesteps shared by inversion, denoising and caches.
    pub fn timesteps(&self) -> &[u32] {
        &self.timesteps
    }

    pub fn prompt_embedding(&self) -> &PromptEmbedding {
        &self.cond
    }

    fn inversion_options(&self) -> InversionOptions {
        InversionOptions {
            timesteps: self.timesteps.clone(),
            refine_iters: self.cfg.inversion_refine_iters,
        }
    }

    /// Inverts every background latent, in parallel across frames.
    pub fn invert_background(&self, bg: &[LatentFrame]) -> Result<LatentTrajectory, PipelineError> {
        if let Some(first) = bg.first() {
            if let Some(bad) = bg.iter().find(|l| l.shape() != first.shape()) {
                return Err(PipelineError::Input(format!(
                    "frame {} latent is {:?}, frame {} is {:?}",
                    bad.frame,
                    bad.shape(),
                    first.frame,
                    first.shape()
                )));
            }
        }
        let prompt = if self.cfg.inversion_conditional {
            &self.cond
        } else {
            &self.uncond
        };
        let opts = self.inversion_options();
        let rows = bg
            .par_iter()
            .map(|x0| {
                ddim_invert_trajectory(x0, &self.denoiser, &self.sched, prompt, &opts)
                    .map_err(at_frame(x0.frame, "inversion"))
            })
            .collect::<Result<Vec<TrajectoryRow>, _>>()?;
        Ok(LatentTrajectory::from_rows(rows))
    }

    /// Gaussian starting latent for the per-frame baseline; identical for
    /// every frame of a run.
    pub fn seeded_noise(&self, shape: [usize; 3], frame: usize) -> LatentFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let data = ndarray::Array3::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng));
        LatentFrame::new(data, frame, *self.timesteps.last().expect("at least one step"))
    }

    fn new_recorder(&self, frame: usize) -> CacheBuilder {
        CacheBuilder::new(frame, self.denoiser.self_attention_layers(), self.timesteps.clone())
    }

    /// Runs the reverse loop from `init` at the largest inference timestep to
    /// a clean latent.
    fn denoise(
        &self,
        init: &LatentFrame,
        inputs: &FrameInputs,
        known: Option<&TrajectoryRow>,
        anchor: Option<&AnchorCache>,
        mut recorder: Option<&mut CacheBuilder>,
    ) -> Result<LatentFrame, PipelineError> {
        let frame = init.frame;
        let t_max = *self.timesteps.last().expect("at least one step");
        if init.timestep != t_max {
            return Err(PipelineError::Input(format!(
                "frame {frame}: initial latent is at timestep {}, expected {t_max}",
                init.timestep
            )));
        }
        let mut z = init.clone();
        for k in (0..self.timesteps.len()).rev() {
            let t = self.timesteps[k];
            let t_prev = if k == 0 { 0 } else { self.timesteps[k - 1] };
            let input = DenoiserInput {
                noisy_latent: &z,
                masked_bg_latent: &inputs.masked_bg_latent,
                mask: &inputs.mask,
                timestep: t,
                prompt: &self.cond,
                control: inputs.control.as_ref(),
                guidance_scale: self.cfg.guidance_scale,
            };
            let mut hook = match (anchor, recorder.as_deref_mut()) {
                (Some(a), rec) => AttentionHook::anchor_extended(a, rec),
                (None, Some(rec)) => AttentionHook::record(rec),
                (None, None) => AttentionHook::self_only(),
            };
            let eps = predict_guided_eps(&self.denoiser, &input, &self.uncond, &mut hook)
                .map_err(at_frame(frame, "denoise"))?;
            z = ddim_step(&z, &eps, t, t_prev, &self.sched).map_err(at_frame(frame, "denoise"))?;
            if let Some(row) = known {
                let target = if t_prev == 0 {
                    &inputs.bg_latent
                } else {
                    row.at(t_prev).ok_or_else(|| {
                        PipelineError::Input(format!("frame {frame}: trajectory lacks timestep {t_prev}"))
                    })?
                };
                blend_known(&mut z, target, &inputs.mask);
            }
        }
        Ok(z)
    }

    fn blend_row<'a>(&self, row: Option<&'a TrajectoryRow>) -> Option<&'a TrajectoryRow> {
        row.filter(|_| self.cfg.latent_blend)
    }

    /// Inpaints a frame without an anchor and returns its complete cache.
    /// `init` is the inverted background (or seeded noise in the baseline).
    pub fn inpaint_first_frame(
        &self,
        init: &LatentFrame,
        inputs: &FrameInputs,
        row: Option<&TrajectoryRow>,
    ) -> Result<(LatentFrame, AnchorCache), PipelineError> {
        let frame = init.frame;
        let mut rec = self.new_recorder(frame);
        let out = self.denoise(init, inputs, self.blend_row(row), None, Some(&mut rec))?;
        let cache = rec.finish().map_err(at_frame(frame, "cache"))?;
        Ok((out, cache))
    }

    /// Inpaints frame `i >= 2` attending to `anchor`, recording its own
    /// features for promotion.
    pub fn inpaint_frame_with_anchor(
        &self,
        row: &TrajectoryRow,
        inputs: &FrameInputs,
        anchor: &AnchorCache,
    ) -> Result<(LatentFrame, CacheBuilder), PipelineError> {
        let init = row.last();
        let frame = init.frame;
        if frame < 2 {
            return Err(PipelineError::Input(format!(
                "anchored inpainting needs frame >= 2, got {frame}"
            )));
        }
        let mut rec = self.new_recorder(frame);
        let out = self.denoise(init, inputs, self.blend_row(Some(row)), Some(anchor), Some(&mut rec))?;
        Ok((out, rec))
    }

    fn check_inputs(&self, inputs: &[FrameInputs]) -> Result<(), PipelineError> {
        if inputs.is_empty() {
            return Err(PipelineError::Input("no frames".into()));
        }
        let with_control = inputs.iter().filter(|f| f.control.is_some()).count();
        if with_control != 0 && with_control != inputs.len() {
            return Err(PipelineError::Input(format!(
                "control sequence covers {with_control} of {} frames",
                inputs.len()
            )));
        }
        for (i, f) in inputs.iter().enumerate() {
            let [_, h, w] = f.bg_latent.shape();
            if f.masked_bg_latent.shape() != f.bg_latent.shape() || f.mask.dims() != (h, w) {
                return Err(PipelineError::Input(format!(
                    "frame {}: misaligned latents and mask",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Edits a whole clip. Frames are renumbered `1..=n` in input order.
    pub fn run(&self, inputs: &[FrameInputs], observer: &mut dyn RunObserver) -> Result<EditResult, PipelineError> {
        self.check_inputs(inputs)?;
        let mut stats = RunStats {
            frames: inputs.len(),
            ..RunStats::default()
        };
        let latents = match self.cfg.mode {
            Mode::Invi => self.run_invi(inputs, observer, &mut stats)?,
            Mode::PerFrame => self.run_per_frame(inputs, observer, &mut stats)?,
        };
        stats.denoise_steps = self.timesteps.len() * inputs.len();
        let start = Instant::now();
        let crops = latents
            .par_iter()
            .map(|l| self.vae.decode(l).map_err(at_frame(l.frame, "decode")))
            .collect::<Result<Vec<_>, _>>()?;
        stats.decode_ms = ms(start);
        info!(
            "edited {} frames, {} denoise steps, peak cache {} bytes",
            stats.frames, stats.denoise_steps, stats.peak_cache_bytes
        );
        Ok(EditResult { latents, crops, stats })
    }

    fn run_invi(
        &self,
        inputs: &[FrameInputs],
        observer: &mut dyn RunObserver,
        stats: &mut RunStats,
    ) -> Result<Vec<LatentFrame>, PipelineError> {
        let bg: Vec<LatentFrame> = inputs
            .iter()
            .enumerate()
            .map(|(i, f)| LatentFrame::new(f.bg_latent.data.clone(), i + 1, 0))
            .collect();
        let start = Instant::now();
        let traj = self.invert_background(&bg)?;
        stats.inversion_ms = ms(start);

        let expected = self.denoiser.self_attention_layers() * self.timesteps.len();
        let mut out = Vec::with_capacity(inputs.len());
        let mut anchor: Option<AnchorCache> = None;
        for (i, (row, frame_in)) in traj.rows().iter().zip(inputs).enumerate() {
            let frame = i + 1;
            let start = Instant::now();
            let event = match anchor.take() {
                None => {
                    let (z, cache) = self.inpaint_first_frame(row.last(), frame_in, Some(row))?;
                    out.push(z);
                    let bytes = cache.resident_bytes();
                    let event = FrameEvent {
                        frame,
                        anchor_frame: None,
                        recorded_entries: cache.len(),
                        expected_entries: expected,
                        cache_complete: true,
                        frame_cache_bytes: bytes,
                        resident_cache_bytes: bytes,
                    };
                    anchor = Some(self.maybe_spill(cache, frame)?);
                    event
                }
                Some(prev) => {
                    let (z, rec) = self.inpaint_frame_with_anchor(row, frame_in, &prev)?;
                    out.push(z);
                    let event = FrameEvent {
                        frame,
                        anchor_frame: Some(prev.anchor_frame()),
                        recorded_entries: rec.len(),
                        expected_entries: expected,
                        cache_complete: rec.is_complete(),
                        frame_cache_bytes: rec.bytes(),
                        resident_cache_bytes: prev.resident_bytes() + rec.bytes(),
                    };
                    stats.anchor_sequence.push(prev.anchor_frame());
                    let promoted = cache_promote(prev, rec).map_err(at_frame(frame, "cache"))?;
                    anchor = Some(self.maybe_spill(promoted, frame)?);
                    event
                }
            };
            stats.frame_ms.push(ms(start));
            stats.peak_cache_bytes = stats.peak_cache_bytes.max(event.resident_cache_bytes);
            stats.max_frame_cache_bytes = stats.max_frame_cache_bytes.max(event.frame_cache_bytes);
            debug!("{event:?}");
            observer.on_frame(&event);
        }
        Ok(out)
    }

    fn maybe_spill(&self, cache: AnchorCache, frame: usize) -> Result<AnchorCache, PipelineError> {
        match &self.cfg.cache_spill_dir {
            Some(dir) => cache.spill_to(dir).map_err(at_frame(frame, "cache spill")),
            None => Ok(cache),
        }
    }

    /// Every frame from the same seeded noise, without anchors.
    fn run_per_frame(
        &self,
        inputs: &[FrameInputs],
        observer: &mut dyn RunObserver,
        stats: &mut RunStats,
    ) -> Result<Vec<LatentFrame>, PipelineError> {
        let expected = self.denoiser.self_attention_layers() * self.timesteps.len();
        let mut out = Vec::with_capacity(inputs.len());
        for (i, frame_in) in inputs.iter().enumerate() {
            let frame = i + 1;
            let start = Instant::now();
            let init = self.seeded_noise(frame_in.bg_latent.shape(), frame);
            let (z, cache) = self.inpaint_first_frame(&init, frame_in, None)?;
            out.push(z);
            stats.frame_ms.push(ms(start));
            let bytes = cache.resident_bytes();
            stats.peak_cache_bytes = stats.peak_cache_bytes.max(bytes);
            stats.max_frame_cache_bytes = stats.max_frame_cache_bytes.max(bytes);
            observer.on_frame(&FrameEvent {
                frame,
                anchor_frame: None,
                recorded_entries: cache.len(),
                expected_entries: expected,
                cache_complete: true,
                frame_cache_bytes: bytes,
                resident_cache_bytes: bytes,
            });
        }
        Ok(out)
    }
}

/// `z = m * z + (1 - m) * known`, with the mask broadcast over channels.
fn blend_known(z: &mut LatentFrame, known: &LatentFrame, mask: &MaskPlane) {
    for (mut zc, kc) in z.data.axis_iter_mut(Axis(0)).zip(known.data.axis_iter(Axis(0))) {
        ndarray::Zip::from(&mut zc)
            .and(&kc)
            .and(&mask.data)
            .for_each(|z, &k, &m| *z = m * *z + (1.0 - m) * k);
    }
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}
