use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::PromptEmbedding;

/// Turns prompt text into token embeddings.
pub trait TextEncoder: Send + Sync {
    fn width(&self) -> usize;
    fn encode(&self, text: &str) -> PromptEmbedding;
}

/// Toy encoder: every lower-cased whitespace token maps to a unit-scale vector
/// seeded by its SHA-256 digest. The empty prompt encodes to a single
/// `<empty>` token.
#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    width: usize,
    max_tokens: usize,
}

impl HashTextEncoder {
    pub fn new(width: usize, max_tokens: usize) -> Self {
        Self {
            width: width.max(1),
            max_tokens: max_tokens.max(1),
        }
    }

    fn token_vector(&self, token: &str) -> Vec<f32> {
        let digest = Sha256::digest(token.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let scale = 1.0 / (self.width as f32).sqrt();
        (0..self.width)
            .map(|_| {
                let x: f32 = StandardNormal.sample(&mut rng);
                x * scale
            })
            .collect()
    }
}

impl Default for HashTextEncoder {
    fn default() -> Self {
        Self::new(8, 16)
    }
}

impl TextEncoder for HashTextEncoder {
    fn width(&self) -> usize {
        self.width
    }

    fn encode(&self, text: &str) -> PromptEmbedding {
        let mut tokens: Vec<String> = text
            .split_whitespace()
            .map(str::to_lowercase)
            .take(self.max_tokens)
            .collect();
        if tokens.is_empty() {
            tokens.push("<empty>".into());
        }
        let rows: Vec<f32> = tokens.iter().flat_map(|t| self.token_vector(t)).collect();
        let mat = Array2::from_shape_vec((tokens.len(), self.width), rows).expect("row-major token matrix");
        PromptEmbedding::new(mat, text).expect("at least one token")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_case_insensitive() {
        let enc = HashTextEncoder::default();
        let a = enc.encode("A red Car");
        let b = enc.encode("a red car");
        assert_eq!(a.tokens(), b.tokens());
        assert_eq!(a.tokens().nrows(), 3);
        assert_eq!(a.source_text(), "A red Car");
    }

    #[test]
    fn empty_prompt_has_one_token() {
        let enc = HashTextEncoder::new(4, 8);
        let e = enc.encode("   ");
        assert_eq!(e.tokens().dim(), (1, 4));
        assert_ne!(e.tokens(), enc.encode("car").tokens());
    }

    #[test]
    fn truncates_long_prompts() {
        let enc = HashTextEncoder::new(4, 2);
        assert_eq!(enc.encode("one two three").tokens().nrows(), 2);
    }
}
