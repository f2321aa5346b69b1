//! Noise schedules, the deterministic DDIM update and DDIM inversion.
//!
//! Timesteps are integers in `0..=T`. Timestep `0` is the clean sample and has
//! a cumulative signal rate of exactly one; timestep `t >= 1` reads
//! `alpha_bar[t - 1]`. All DDIM formulas use the cumulative rate.

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{predict_eps, AttentionHook, DenoiserError, DenoiserHandle, DenoiserInput, PromptEmbedding};
use crate::roi::MaskPlane;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("step count must be at least 1, got {0}")]
    InvalidStepCount(usize),
    #[error("variance {0} outside (0, 1)")]
    InvalidVariance(f64),
    #[error("beta_start {start} must not exceed beta_end {end}")]
    InvertedRange { start: f64, end: f64 },
    #[error("timestep {t} outside 0..={max}")]
    TimestepOutOfRange { t: u32, max: u32 },
    #[error("timesteps out of order: {from} -> {to}")]
    NonMonotone { from: u32, to: u32 },
    #[error("latent shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: [usize; 3], right: [usize; 3] },
    #[error("{steps} inference steps cannot be drawn from {train} training steps")]
    TooManyInferenceSteps { steps: usize, train: usize },
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSpacing {
    Linear,
    ScaledLinear,
}

impl std::str::FromStr for BetaSpacing {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Self::Linear),
            "scaled_linear" => Ok(Self::ScaledLinear),
            other => Err(format!("unknown beta spacing `{other}`")),
        }
    }
}

/// Variances, per-step signal rates and cumulative signal rates for `T` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, spacing: BetaSpacing) -> Result<Self, ScheduleError> {
        if steps == 0 {
            return Err(ScheduleError::InvalidStepCount(steps));
        }
        for b in [beta_start, beta_end] {
            if !(b > 0.0 && b < 1.0) {
                return Err(ScheduleError::InvalidVariance(b));
            }
        }
        if beta_start > beta_end {
            return Err(ScheduleError::InvertedRange {
                start: beta_start,
                end: beta_end,
            });
        }
        let lerp = |lo: f64, hi: f64, i: usize| {
            if steps == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (steps - 1) as f64
            }
        };
        let beta = (0..steps)
            .map(|i| match spacing {
                BetaSpacing::Linear => lerp(beta_start, beta_end, i),
                BetaSpacing::ScaledLinear => lerp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2),
            })
            .collect();
        Self::from_betas(beta)
    }

    /// Builds a schedule from explicit variances.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self, ScheduleError> {
        if beta.is_empty() {
            return Err(ScheduleError::InvalidStepCount(0));
        }
        if let Some(&bad) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(ScheduleError::InvalidVariance(bad));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn max_timestep(&self) -> u32 {
        self.beta.len() as u32
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Cumulative signal rate at timestep `t`, with `alpha_bar_at(0) == 1`.
    pub fn alpha_bar_at(&self, t: u32) -> Result<f64, ScheduleError> {
        match t {
            0 => Ok(1.0),
            t if t <= self.max_timestep() => Ok(self.alpha_bar[t as usize - 1]),
            t => Err(ScheduleError::TimestepOutOfRange {
                t,
                max: self.max_timestep(),
            }),
        }
    }

    /// Uniformly strided inference timesteps `t_1 < ... < t_steps = T`, all `>= 1`.
    pub fn inference_timesteps(&self, steps: usize) -> Result<Vec<u32>, ScheduleError> {
        let train = self.steps();
        if steps == 0 {
            return Err(ScheduleError::InvalidStepCount(0));
        }
        if steps > train {
            return Err(ScheduleError::TooManyInferenceSteps { steps, train });
        }
        Ok((1..=steps)
            .map(|k| ((k * train) as f64 / steps as f64).round() as u32)
            .collect())
    }
}

/// A latent plane stored channel-first (`C x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFrame {
    pub data: Array3<f32>,
    /// 1-based position of the frame in the clip.
    pub frame: usize,
    pub timestep: u32,
}

impl LatentFrame {
    pub fn new(data: Array3<f32>, frame: usize, timestep: u32) -> Self {
        Self { data, frame, timestep }
    }

    pub fn zeros(shape: [usize; 3], frame: usize, timestep: u32) -> Self {
        Self::new(Array3::zeros(shape), frame, timestep)
    }

    pub fn shape(&self) -> [usize; 3] {
        let (c, h, w) = self.data.dim();
        [c, h, w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &LatentFrame) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt()
    }

    pub(crate) fn ensure_same_shape(&self, other: &LatentFrame) -> Result<(), ScheduleError> {
        ensure_shape(self.shape(), other.shape())
    }
}

fn ensure_shape(left: [usize; 3], right: [usize; 3]) -> Result<(), ScheduleError> {
    if left == right {
        Ok(())
    } else {
        Err(ScheduleError::ShapeMismatch { left, right })
    }
}

/// The inverted latents of one frame, ascending in timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub frame: usize,
    latents: Vec<LatentFrame>,
}

impl TrajectoryRow {
    pub fn latents(&self) -> &[LatentFrame] {
        &self.latents
    }

    pub fn timesteps(&self) -> Vec<u32> {
        self.latents.iter().map(|l| l.timestep).collect()
    }

    pub fn at(&self, t: u32) -> Option<&LatentFrame> {
        self.latents.iter().find(|l| l.timestep == t)
    }

    /// The most-noised latent, where denoising starts.
    pub fn last(&self) -> &LatentFrame {
        self.latents.last().expect("trajectory rows are never empty")
    }
}

/// Inverted latents for every frame of a clip.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatentTrajectory {
    rows: Vec<TrajectoryRow>,
}

impl LatentTrajectory {
    pub(crate) fn from_rows(rows: Vec<TrajectoryRow>) -> Self {
        debug_assert!(rows
            .windows(2)
            .all(|w| { w[0].timesteps() == w[1].timesteps() && w[0].last().shape() == w[1].last().shape() }));
        Self { rows }
    }

    pub fn rows(&self) -> &[TrajectoryRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, frame: usize) -> Option<&TrajectoryRow> {
        self.rows.iter().find(|r| r.frame == frame)
    }
}

/// Closed-form forward diffusion `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`.
pub fn forward_sample(
    x0: &LatentFrame,
    t: u32,
    noise: &LatentFrame,
    sched: &NoiseSchedule,
) -> Result<LatentFrame, ScheduleError> {
    if t == 0 || t > sched.max_timestep() {
        return Err(ScheduleError::TimestepOutOfRange {
            t,
            max: sched.max_timestep(),
        });
    }
    x0.ensure_same_shape(noise)?;
    let ab = sched.alpha_bar_at(t)?;
    let out = combine(&x0.data, ab.sqrt(), &noise.data, (1.0 - ab).sqrt());
    Ok(LatentFrame::new(out, x0.frame, t))
}

fn combine(a: &Array3<f32>, ca: f64, b: &Array3<f32>, cb: f64) -> Array3<f32> {
    let mut out = Array3::zeros(a.raw_dim());
    Zip::from(&mut out)
        .and(a)
        .and(b)
        .for_each(|o, &x, &y| *o = (ca * f64::from(x) + cb * f64::from(y)) as f32);
    out
}

/// Moves `z` from cumulative rate `ab_from` to `ab_to` holding the noise estimate fixed.
fn ddim_transfer(z: &Array3<f32>, eps: &Array3<f32>, ab_from: f64, ab_to: f64) -> Array3<f32> {
    let ratio = (ab_to / ab_from).sqrt();
    let eps_coef = (1.0 - ab_to).sqrt() - ratio * (1.0 - ab_from).sqrt();
    combine(z, ratio, eps, eps_coef)
}

/// Deterministic (eta = 0) DDIM update from `t` down to `t_prev`.
pub fn ddim_step(
    z_t: &LatentFrame,
    eps: &LatentFrame,
    t: u32,
    t_prev: u32,
    sched: &NoiseSchedule,
) -> Result<LatentFrame, ScheduleError> {
    if t_prev > t {
        return Err(ScheduleError::NonMonotone { from: t, to: t_prev });
    }
    z_t.ensure_same_shape(eps)?;
    let (ab_t, ab_prev) = (sched.alpha_bar_at(t)?, sched.alpha_bar_at(t_prev)?);
    if t_prev == t {
        return Ok(LatentFrame::new(z_t.data.clone(), z_t.frame, t));
    }
    let out = ddim_transfer(&z_t.data, &eps.data, ab_t, ab_prev);
    Ok(LatentFrame::new(out, z_t.frame, t_prev))
}

/// One DDIM inversion step from `t` up to `t_next`.
pub fn ddim_invert_step(
    z_t: &LatentFrame,
    eps: &LatentFrame,
    t: u32,
    t_next: u32,
    sched: &NoiseSchedule,
) -> Result<LatentFrame, ScheduleError> {
    if t_next < t {
        return Err(ScheduleError::NonMonotone { from: t, to: t_next });
    }
    z_t.ensure_same_shape(eps)?;
    let (ab_t, ab_next) = (sched.alpha_bar_at(t)?, sched.alpha_bar_at(t_next)?);
    if t_next == t {
        return Ok(LatentFrame::new(z_t.data.clone(), z_t.frame, t));
    }
    let out = ddim_transfer(&z_t.data, &eps.data, ab_t, ab_next);
    Ok(LatentFrame::new(out, z_t.frame, t_next))
}

/// Knobs for [`ddim_invert_trajectory`].
#[derive(Debug, Clone, PartialEq)]
pub struct InversionOptions {
    /// Ascending inference timesteps, all `>= 1`.
    pub timesteps: Vec<u32>,
    /// Extra fixed-point passes per step. With `0` each step uses the noise
    /// predicted at its start point; each pass re-predicts at the current end
    /// point so that the reverse step maps the result back onto its start.
    pub refine_iters: usize,
}

/// Generic inversion loop over a noise predictor `eps_at(z, t)`.
pub fn invert_with<F>(
    x0: &LatentFrame,
    sched: &NoiseSchedule,
    opts: &InversionOptions,
    mut eps_at: F,
) -> Result<TrajectoryRow, ScheduleError>
where
    F: FnMut(&LatentFrame, u32) -> Result<LatentFrame, ScheduleError>,
{
    if opts.timesteps.is_empty() {
        return Err(ScheduleError::InvalidStepCount(0));
    }
    let mut latents = Vec::with_capacity(opts.timesteps.len());
    let mut z = LatentFrame::new(x0.data.clone(), x0.frame, 0);
    for &t_next in &opts.timesteps {
        let t = z.timestep;
        if t_next <= t {
            return Err(ScheduleError::NonMonotone { from: t, to: t_next });
        }
        let eps = eps_at(&z, t)?;
        let mut next = ddim_invert_step(&z, &eps, t, t_next, sched)?;
        for _ in 0..opts.refine_iters {
            let eps = eps_at(&next, t_next)?;
            next = ddim_invert_step(&z, &eps, t, t_next, sched)?;
        }
        latents.push(next.clone());
        z = next;
    }
    Ok(TrajectoryRow {
        frame: x0.frame,
        latents,
    })
}

/// Inverts a clean background latent into its noisy trajectory.
///
/// The denoiser sees the background as fully known: the masked-background
/// channels carry `x0` itself and the mask is empty.
pub fn ddim_invert_trajectory(
    x0: &LatentFrame,
    denoiser: &DenoiserHandle,
    sched: &NoiseSchedule,
    prompt: &PromptEmbedding,
    opts: &InversionOptions,
) -> Result<TrajectoryRow, ScheduleError> {
    if x0.timestep != 0 {
        return Err(ScheduleError::NonMonotone {
            from: x0.timestep,
            to: 0,
        });
    }
    let [_, h, w] = x0.shape();
    let mask = MaskPlane::zeros(h, w, x0.frame);
    invert_with(x0, sched, opts, |z, t| {
        let input = DenoiserInput {
            noisy_latent: z,
            masked_bg_latent: x0,
            mask: &mask,
            timestep: t,
            prompt,
            control: None,
            guidance_scale: 1.0,
        };
        Ok(predict_eps(denoiser, &input, &mut AttentionHook::self_only())?)
    })
}
