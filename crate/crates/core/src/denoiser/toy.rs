use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{AttentionHook, Denoiser, DenoiserError, DenoiserInput, INPUT_CHANNELS, LATENT_CHANNELS};
use crate::scheduler::LatentFrame;

/// Predicts zero noise for every input.
#[derive(Debug, Default, Clone)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn descriptor(&self) -> &str {
        "toy:zero"
    }

    fn self_attention_layers(&self) -> usize {
        0
    }

    fn forward_eps(
        &self,
        input: &DenoiserInput<'_>,
        _hook: &mut AttentionHook<'_>,
    ) -> Result<LatentFrame, DenoiserError> {
        Ok(LatentFrame::zeros(
            input.noisy_latent.shape(),
            input.noisy_latent.frame,
            input.timestep,
        ))
    }
}

/// `eps = A · input`, a fixed seeded channel map applied at every latent pixel.
#[derive(Debug, Clone)]
pub struct LinearDenoiser {
    weights: Array2<f32>,
}

impl LinearDenoiser {
    pub const DEFAULT_SEED: u64 = 0x001A_7E57;

    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.05).unwrap();
        Self {
            weights: Array2::from_shape_simple_fn((LATENT_CHANNELS, INPUT_CHANNELS), || normal.sample(&mut rng)),
        }
    }

    pub fn from_weights(weights: Array2<f32>) -> Result<Self, DenoiserError> {
        if weights.dim() != (LATENT_CHANNELS, INPUT_CHANNELS) {
            return Err(DenoiserError::ChannelMismatch {
                expected: INPUT_CHANNELS,
                found: weights.ncols(),
            });
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Array2<f32> {
        &self.weights
    }
}

impl Default for LinearDenoiser {
    fn default() -> Self {
        Self::seeded(Self::DEFAULT_SEED)
    }
}

impl Denoiser for LinearDenoiser {
    fn descriptor(&self) -> &str {
        "toy:linear"
    }

    fn self_attention_layers(&self) -> usize {
        0
    }

    fn forward_eps(
        &self,
        input: &DenoiserInput<'_>,
        _hook: &mut AttentionHook<'_>,
    ) -> Result<LatentFrame, DenoiserError> {
        let x = input.stacked_channels();
        let (_, h, w) = x.dim();
        let flat = x
            .into_shape_with_order((INPUT_CHANNELS, h * w))
            .map_err(|e| DenoiserError::Shape(e.to_string()))?;
        let eps: Array3<f32> = self
            .weights
            .dot(&flat)
            .into_shape_with_order((LATENT_CHANNELS, h, w))
            .map_err(|e| DenoiserError::Shape(e.to_string()))?;
        Ok(LatentFrame::new(eps, input.noisy_latent.frame, input.timestep))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{predict_eps, DenoiserHandle, PromptEmbedding};
    use crate::roi::MaskPlane;
    use std::sync::Arc;

    fn inputs() -> (LatentFrame, LatentFrame, MaskPlane, PromptEmbedding) {
        let z = LatentFrame::new(
            Array3::from_shape_fn((4, 3, 2), |(c, h, w)| (c + 2 * h + w) as f32 * 0.1),
            1,
            9,
        );
        let bg = LatentFrame::new(Array3::from_elem((4, 3, 2), 0.5), 1, 0);
        let mask = MaskPlane::new(Array2::from_elem((3, 2), 1.0), 1).unwrap();
        let prompt = PromptEmbedding::new(Array2::ones((1, 8)), "p").unwrap();
        (z, bg, mask, prompt)
    }

    #[test]
    fn zero_denoiser_predicts_zero() {
        let (z, bg, mask, prompt) = inputs();
        let h: DenoiserHandle = Arc::new(ZeroDenoiser);
        let input = DenoiserInput {
            noisy_latent: &z,
            masked_bg_latent: &bg,
            mask: &mask,
            timestep: 9,
            prompt: &prompt,
            control: None,
            guidance_scale: 1.0,
        };
        let eps = predict_eps(&h, &input, &mut AttentionHook::self_only()).unwrap();
        assert!(eps.data.iter().all(|v| *v == 0.0));
        assert_eq!(eps.timestep, 9);
    }

    #[test]
    fn linear_denoiser_is_reproducible_and_linear() {
        let (z, bg, mask, prompt) = inputs();
        let a: DenoiserHandle = Arc::new(LinearDenoiser::default());
        let b: DenoiserHandle = Arc::new(LinearDenoiser::default());
        let input = DenoiserInput {
            noisy_latent: &z,
            masked_bg_latent: &bg,
            mask: &mask,
            timestep: 9,
            prompt: &prompt,
            control: None,
            guidance_scale: 1.0,
        };
        let e1 = predict_eps(&a, &input, &mut AttentionHook::self_only()).unwrap();
        let e2 = predict_eps(&b, &input, &mut AttentionHook::self_only()).unwrap();
        assert_eq!(e1.data, e2.data);
        // Per-pixel oracle.
        let lin = LinearDenoiser::default();
        let x = input.stacked_channels();
        for c in 0..4 {
            for (i, j) in [(0, 0), (2, 1)] {
                let direct: f32 = (0..9).map(|k| lin.weights()[[c, k]] * x[[k, i, j]]).sum();
                assert!((direct - e1.data[[c, i, j]]).abs() < 1e-6);
            }
        }
    }
}
