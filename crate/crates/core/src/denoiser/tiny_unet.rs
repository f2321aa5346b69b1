//! A two-level toy U-Net with one self-attention and one cross-attention
//! layer per level and a ControlNet-style residual branch.
//!
//! Layout of one forward pass on a `9 x H x W` input (H, W divisible by 4):
//!
//! ```text
//! h0 = tanh(in_proj(x) + time(t)) + control(C)      H   x W
//! d1 = pool(h0); d1 += self_attn_0(d1); d1 += cross_attn_0(d1, prompt)    H/2 x W/2
//! d2 = pool(d1); d2 += self_attn_1(d2); d2 += cross_attn_1(d2, prompt)    H/4 x W/4
//! d2 = tanh(mid(d2))
//! u1 = tanh(up_proj(upsample(d2) + d1))
//! eps = out_proj(upsample(u1) + h0)
//! ```

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{AttentionHook, ControlImage, Denoiser, DenoiserError, DenoiserInput, INPUT_CHANNELS, LATENT_CHANNELS};
use crate::attention::multi_head_extended_attention;
use crate::attention::KVPair;
use crate::raster::{area_resize, rgb_to_planes};
use crate::scheduler::LatentFrame;

const TIME_FEATURES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    pub wo: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBranch {
    /// `hidden x 3` projection of the RGB control planes.
    pub proj: Array2<f32>,
    pub scale: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyUnetWeights {
    pub hidden: usize,
    pub heads: usize,
    pub text_width: usize,
    pub in_proj: Array2<f32>,
    pub in_bias: Array1<f32>,
    pub time_proj: Array2<f32>,
    pub self_attn: Vec<AttentionWeights>,
    pub cross_attn: Vec<AttentionWeights>,
    pub mid: Array2<f32>,
    pub up_proj: Array2<f32>,
    pub out_proj: Array2<f32>,
    pub out_bias: Array1<f32>,
    pub control: Option<ControlBranch>,
}

impl TinyUnetWeights {
    pub const DEFAULT_SEED: u64 = 0x0071_A0E7;

    pub fn seeded(seed: u64, hidden: usize, heads: usize, text_width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |rows: usize, cols: usize, gain: f32| {
            let scale = gain / (cols as f32).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || {
                let x: f32 = StandardNormal.sample(&mut rng);
                x * scale
            })
        };
        let attn = |kv_in: usize, mat: &mut dyn FnMut(usize, usize, f32) -> Array2<f32>| AttentionWeights {
            wq: mat(hidden, hidden, 1.0),
            wk: mat(hidden, kv_in, 1.0),
            wv: mat(hidden, kv_in, 1.0),
            wo: mat(hidden, hidden, 0.5),
        };
        let in_proj = mat(hidden, INPUT_CHANNELS, 1.0);
        let in_bias = Array1::zeros(hidden);
        let time_proj = mat(hidden, TIME_FEATURES, 0.5);
        let self_attn = vec![attn(hidden, &mut mat), attn(hidden, &mut mat)];
        let cross_attn = vec![attn(text_width, &mut mat), attn(text_width, &mut mat)];
        let mid = mat(hidden, hidden, 1.0);
        let up_proj = mat(hidden, hidden, 1.0);
        let out_proj = mat(LATENT_CHANNELS, hidden, 0.5);
        let control = Some(ControlBranch {
            proj: mat(hidden, 3, 1.0),
            scale: 1.0,
        });
        Self {
            hidden,
            heads,
            text_width,
            in_proj,
            in_bias,
            time_proj,
            self_attn,
            cross_attn,
            mid,
            up_proj,
            out_proj,
            out_bias: Array1::zeros(LATENT_CHANNELS),
            control,
        }
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        let bad = |what: &str| Err(DenoiserError::Shape(format!("tiny-unet weights: {what}")));
        if self.in_proj.ncols() != INPUT_CHANNELS {
            return Err(DenoiserError::ChannelMismatch {
                expected: INPUT_CHANNELS,
                found: self.in_proj.ncols(),
            });
        }
        let h = self.hidden;
        if self.heads == 0 || !h.is_multiple_of(self.heads) {
            return bad("heads must divide hidden width");
        }
        if self.in_proj.nrows() != h || self.in_bias.len() != h {
            return bad("input projection");
        }
        if self.time_proj.dim() != (h, TIME_FEATURES) {
            return bad("time projection");
        }
        if self.self_attn.len() != 2 || self.cross_attn.len() != 2 {
            return bad("expected two self- and two cross-attention layers");
        }
        for (a, kv_in) in self
            .self_attn
            .iter()
            .map(|a| (a, h))
            .chain(self.cross_attn.iter().map(|a| (a, self.text_width)))
        {
            if a.wq.dim() != (h, h) || a.wk.dim() != (h, kv_in) || a.wv.dim() != (h, kv_in) || a.wo.dim() != (h, h) {
                return bad("attention projection");
            }
        }
        if self.mid.dim() != (h, h) || self.up_proj.dim() != (h, h) {
            return bad("mid/up projection");
        }
        if self.out_proj.dim() != (LATENT_CHANNELS, h) || self.out_bias.len() != LATENT_CHANNELS {
            return bad("output projection");
        }
        if let Some(c) = &self.control {
            if c.proj.dim() != (h, 3) {
                return bad("control projection");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TinyUnet {
    descriptor: String,
    w: TinyUnetWeights,
}

impl TinyUnet {
    pub fn seeded(seed: u64) -> Self {
        Self {
            descriptor: "toy:tiny-unet".into(),
            w: TinyUnetWeights::seeded(seed, 8, 2, 8),
        }
    }

    pub fn from_weights(descriptor: impl Into<String>, w: TinyUnetWeights) -> Result<Self, DenoiserError> {
        w.validate()?;
        Ok(Self {
            descriptor: descriptor.into(),
            w,
        })
    }

    pub fn weights(&self) -> &TinyUnetWeights {
        &self.w
    }

    pub fn text_width(&self) -> usize {
        self.w.text_width
    }

    /// Replaces (or removes) the control branch.
    pub fn with_control(mut self, control: Option<ControlBranch>) -> Result<Self, DenoiserError> {
        self.w.control = control;
        self.w.validate()?;
        Ok(self)
    }

    fn control_features(&self, control: &ControlImage, h: usize, w: usize) -> Option<Array2<f32>> {
        let branch = self.w.control.as_ref()?;
        let planes = area_resize(rgb_to_planes(&control.image).view(), h, w);
        Some(to_tokens(&planes).dot(&branch.proj.t()) * branch.scale)
    }

    fn self_attention_block(
        &self,
        layer: usize,
        x: &Array2<f32>,
        t: u32,
        hook: &mut AttentionHook<'_>,
    ) -> Result<Array2<f32>, DenoiserError> {
        let a = &self.w.self_attn[layer];
        let q = x.dot(&a.wq.t());
        let k = x.dot(&a.wk.t());
        let v = x.dot(&a.wv.t());
        let out = hook.self_attention(layer, t, q.view(), k, v, self.w.heads)?;
        Ok(x + &out.dot(&a.wo.t()))
    }

    fn cross_attention_block(
        &self,
        layer: usize,
        x: &Array2<f32>,
        prompt: ArrayView2<f32>,
    ) -> Result<Array2<f32>, DenoiserError> {
        if prompt.ncols() != self.w.text_width {
            return Err(DenoiserError::Shape(format!(
                "prompt width {} does not match model text width {}",
                prompt.ncols(),
                self.w.text_width
            )));
        }
        let a = &self.w.cross_attn[layer];
        let q = x.dot(&a.wq.t());
        let kv = KVPair::new(prompt.dot(&a.wk.t()), prompt.dot(&a.wv.t()), layer, 0)?;
        let out = multi_head_extended_attention(q.view(), &kv, None, self.w.heads)?;
        Ok(x + &out.dot(&a.wo.t()))
    }
}

fn time_features(t: u32) -> Array1<f32> {
    let half = TIME_FEATURES / 2;
    let mut f = Array1::zeros(TIME_FEATURES);
    for k in 0..half {
        let freq = 1.0 / 10_000f64.powf(k as f64 / half as f64);
        let arg = f64::from(t) * freq;
        f[k] = arg.sin() as f32;
        f[k + half] = arg.cos() as f32;
    }
    f
}

/// `C x H x W` to token-major `(H*W) x C`.
fn to_tokens(x: &Array3<f32>) -> Array2<f32> {
    let (c, h, w) = x.dim();
    x.view()
        .into_shape_with_order((c, h * w))
        .expect("contiguous")
        .t()
        .as_standard_layout()
        .into_owned()
}

fn from_tokens(x: &Array2<f32>, h: usize, w: usize) -> Array3<f32> {
    let c = x.ncols();
    x.t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h, w))
        .expect("token count matches plane")
}

/// 2x2 average pooling on token-major features of an `h x w` plane.
fn pool2(x: &Array2<f32>, h: usize, w: usize) -> Array2<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let c = x.ncols();
    let mut out = Array2::zeros((oh * ow, c));
    for y in 0..oh {
        for xx in 0..ow {
            let mut row = out.row_mut(y * ow + xx);
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                row += &x.row((2 * y + dy) * w + 2 * xx + dx);
            }
            row *= 0.25;
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling of an `h x w` plane.
fn upsample2(x: &Array2<f32>, h: usize, w: usize) -> Array2<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Array2::zeros((oh * ow, x.ncols()));
    for y in 0..oh {
        for xx in 0..ow {
            out.row_mut(y * ow + xx).assign(&x.row((y / 2) * w + xx / 2));
        }
    }
    out
}

impl Denoiser for TinyUnet {
    fn descriptor(&self) -> &str {
        &self.descriptor
    }

    fn self_attention_layers(&self) -> usize {
        2
    }

    fn heads(&self) -> usize {
        self.w.heads
    }

    fn text_width(&self) -> Option<usize> {
        Some(self.w.text_width)
    }

    fn forward_eps(
        &self,
        input: &DenoiserInput<'_>,
        hook: &mut AttentionHook<'_>,
    ) -> Result<LatentFrame, DenoiserError> {
        let x = input.stacked_channels();
        let (_, h, w) = x.dim();
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(DenoiserError::Shape(format!(
                "tiny-unet needs latent sides divisible by 4, got {h}x{w}"
            )));
        }
        let t = input.timestep;
        let temb = self.w.time_proj.dot(&time_features(t)) + &self.w.in_bias;
        let mut h0 = to_tokens(&x).dot(&self.w.in_proj.t()) + &temb;
        h0.mapv_inplace(f32::tanh);
        if let Some(ctrl) = input.control.and_then(|c| self.control_features(c, h, w)) {
            h0 += &ctrl;
        }

        let prompt = input.prompt.tokens();
        let d1 = pool2(&h0, h, w);
        let d1 = self.self_attention_block(0, &d1, t, hook)?;
        let d1 = self.cross_attention_block(0, &d1, prompt)?;

        let d2 = pool2(&d1, h / 2, w / 2);
        let d2 = self.self_attention_block(1, &d2, t, hook)?;
        let d2 = self.cross_attention_block(1, &d2, prompt)?;
        let d2 = d2.dot(&self.w.mid.t()).mapv(f32::tanh);

        let u1 = (upsample2(&d2, h / 4, w / 4) + &d1)
            .dot(&self.w.up_proj.t())
            .mapv(f32::tanh);
        let u0 = upsample2(&u1, h / 2, w / 2) + &h0;
        let eps = u0.dot(&self.w.out_proj.t()) + &self.w.out_bias;
        let eps = from_tokens(&eps, h, w);
        debug_assert_eq!(eps.len_of(Axis(0)), LATENT_CHANNELS);
        Ok(LatentFrame::new(eps, input.noisy_latent.frame, t))
    }
}
