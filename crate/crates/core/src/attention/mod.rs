//! Anchor-frame extended attention and the anchor key/value cache.
//!
//! Extended attention lets a frame's queries attend over the union of its own
//! keys and the anchor frame's keys at the same layer and timestep. The two key
//! sets are never physically concatenated; the softmax runs jointly over both
//! segments.

mod cache;
pub mod spill;

pub use cache::{cache_load, cache_promote, cache_store, AnchorCache, CacheBuilder, KVPair};

use ndarray::{s, Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("feature width mismatch: queries have d={query}, keys have d={key}")]
    WidthMismatch { query: usize, key: usize },
    #[error("keys have {keys} tokens but values have {values}")]
    TokenMismatch { keys: usize, values: usize },
    #[error("head count {heads} does not divide feature width {width}")]
    BadHeadCount { heads: usize, width: usize },
    #[error("cache entry (layer {layer}, t={timestep}) stored twice")]
    DuplicateEntry { layer: usize, timestep: u32 },
    #[error("cache entry (layer {layer}, t={timestep}) is not part of this cache's key set")]
    UnexpectedEntry { layer: usize, timestep: u32 },
    #[error("anchor cache has no entry for (layer {layer}, t={timestep})")]
    MissingEntry { layer: usize, timestep: u32 },
    #[error("cache for frame {frame} is incomplete: {missing} entries missing")]
    Incomplete { frame: usize, missing: usize },
    #[error("cannot promote frame {fresh} over anchor frame {anchor}")]
    NotConsecutive { anchor: usize, fresh: usize },
    #[error("cache spill: {0}")]
    Spill(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_pair(q_width: usize, k: &ArrayView2<f32>, v: &ArrayView2<f32>) -> Result<(), AttentionError> {
    if k.ncols() != q_width {
        return Err(AttentionError::WidthMismatch {
            query: q_width,
            key: k.ncols(),
        });
    }
    if k.nrows() != v.nrows() {
        return Err(AttentionError::TokenMismatch {
            keys: k.nrows(),
            values: v.nrows(),
        });
    }
    Ok(())
}

/// Softmax attention of `q` over a chain of key/value segments.
fn attend_segments(q: ArrayView2<f32>, segments: &[(ArrayView2<f32>, ArrayView2<f32>)]) -> Array2<f32> {
    let d = q.ncols();
    let dv = segments.first().map_or(0, |(_, v)| v.ncols());
    let scale = 1.0 / (d as f64).sqrt();
    let total: usize = segments.iter().map(|(k, _)| k.nrows()).sum();
    let mut out = Array2::zeros((q.nrows(), dv));
    let mut logits = vec![0.0f64; total];
    for (row, mut out_row) in q.rows().into_iter().zip(out.rows_mut()) {
        let mut idx = 0;
        for (k, _) in segments {
            for key in k.rows() {
                let dot: f64 = row
                    .iter()
                    .zip(key.iter())
                    .map(|(a, b)| f64::from(*a) * f64::from(*b))
                    .sum();
                logits[idx] = dot * scale;
                idx += 1;
            }
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            denom += *l;
        }
        let mut acc = vec![0.0f64; dv];
        let mut idx = 0;
        for (_, v) in segments {
            for value in v.rows() {
                let w = logits[idx] / denom;
                for (a, x) in acc.iter_mut().zip(value.iter()) {
                    *a += w * f64::from(*x);
                }
                idx += 1;
            }
        }
        for (o, a) in out_row.iter_mut().zip(acc) {
            *o = a as f32;
        }
    }
    out
}

/// Plain scaled dot-product attention, `softmax(Q K^T / sqrt(d)) V`.
pub fn scaled_dot_product_attention(
    q: ArrayView2<f32>,
    k: ArrayView2<f32>,
    v: ArrayView2<f32>,
) -> Result<Array2<f32>, AttentionError> {
    check_pair(q.ncols(), &k, &v)?;
    Ok(attend_segments(q, &[(k, v)]))
}

/// Attention over the frame's own keys extended by the anchor frame's keys.
///
/// With `anchor_kv` absent this is exactly [`scaled_dot_product_attention`].
pub fn extended_attention(
    q: ArrayView2<f32>,
    self_kv: &KVPair,
    anchor_kv: Option<&KVPair>,
) -> Result<Array2<f32>, AttentionError> {
    let width = q.ncols();
    check_pair(width, &self_kv.k.view(), &self_kv.v.view())?;
    let mut segments = vec![(self_kv.k.view(), self_kv.v.view())];
    if let Some(anchor) = anchor_kv {
        check_pair(width, &anchor.k.view(), &anchor.v.view())?;
        if anchor.v.ncols() != self_kv.v.ncols() {
            return Err(AttentionError::WidthMismatch {
                query: self_kv.v.ncols(),
                key: anchor.v.ncols(),
            });
        }
        segments.push((anchor.k.view(), anchor.v.view()));
    }
    Ok(attend_segments(q, &segments))
}

/// Multi-head form: features are split into `heads` equal column blocks and
/// the anchor tokens are appended per head.
pub fn multi_head_extended_attention(
    q: ArrayView2<f32>,
    self_kv: &KVPair,
    anchor_kv: Option<&KVPair>,
    heads: usize,
) -> Result<Array2<f32>, AttentionError> {
    let width = q.ncols();
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(AttentionError::BadHeadCount { heads, width });
    }
    check_pair(width, &self_kv.k.view(), &self_kv.v.view())?;
    if self_kv.v.ncols() != width {
        return Err(AttentionError::WidthMismatch {
            query: width,
            key: self_kv.v.ncols(),
        });
    }
    if let Some(anchor) = anchor_kv {
        check_pair(width, &anchor.k.view(), &anchor.v.view())?;
        if anchor.v.ncols() != width {
            return Err(AttentionError::WidthMismatch {
                query: width,
                key: anchor.v.ncols(),
            });
        }
    }
    let hd = width / heads;
    let mut out = Array2::zeros((q.nrows(), width));
    for h in 0..heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let mut segments = vec![(self_kv.k.slice(cols), self_kv.v.slice(cols))];
        if let Some(anchor) = anchor_kv {
            segments.push((anchor.k.slice(cols), anchor.v.slice(cols)));
        }
        let head_out = attend_segments(q.slice(cols), &segments);
        out.slice_mut(cols).assign(&head_out);
    }
    Ok(out)
}

/// Row-normalized attention weights over the (possibly extended) key set.
pub fn attention_weights(
    q: ArrayView2<f32>,
    self_kv: &KVPair,
    anchor_kv: Option<&KVPair>,
) -> Result<Array2<f64>, AttentionError> {
    let width = q.ncols();
    check_pair(width, &self_kv.k.view(), &self_kv.v.view())?;
    let mut keys: Vec<ArrayView2<f32>> = vec![self_kv.k.view()];
    if let Some(anchor) = anchor_kv {
        check_pair(width, &anchor.k.view(), &anchor.v.view())?;
        keys.push(anchor.k.view());
    }
    let total: usize = keys.iter().map(|k| k.nrows()).sum();
    let scale = 1.0 / (width as f64).sqrt();
    let mut weights = Array2::zeros((q.nrows(), total));
    for (row, mut w_row) in q.rows().into_iter().zip(weights.rows_mut()) {
        let logits: Vec<f64> = keys
            .iter()
            .flat_map(|k| k.rows().into_iter())
            .map(|key| {
                row.iter()
                    .zip(key.iter())
                    .map(|(a, b)| f64::from(*a) * f64::from(*b))
                    .sum::<f64>()
                    * scale
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for (w, l) in w_row.iter_mut().zip(&logits) {
            *w = (l - max).exp() / denom;
        }
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, concatenate, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f32> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-2.0..2.0))
    }

    /// Physically concatenates the key/value sets and runs textbook attention.
    fn concat_oracle(q: &Array2<f32>, k: &Array2<f32>, v: &Array2<f32>) -> Array2<f64> {
        let q = q.mapv(f64::from);
        let k = k.mapv(f64::from);
        let v = v.mapv(f64::from);
        let mut logits = q.dot(&k.t()) / (q.ncols() as f64).sqrt();
        for mut row in logits.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        logits.dot(&v)
    }

    #[test]
    fn symmetric_logits_average_values() {
        let q = array![[0.0f32]];
        let own = KVPair::new(array![[0.0f32]], array![[1.0f32]], 0, 1).unwrap();
        let anc = KVPair::new(array![[0.0f32]], array![[3.0f32]], 0, 1).unwrap();
        let w = attention_weights(q.view(), &own, Some(&anc)).unwrap();
        assert_eq!(w.row(0).to_vec(), vec![0.5, 0.5]);
        let out = extended_attention(q.view(), &own, Some(&anc)).unwrap();
        assert_eq!(out[[0, 0]], 2.0);
    }

    #[test]
    fn absent_anchor_is_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_mat(&mut rng, 4, 8);
        let kv = KVPair::new(rand_mat(&mut rng, 6, 8), rand_mat(&mut rng, 6, 8), 0, 0).unwrap();
        let ext = extended_attention(q.view(), &kv, None).unwrap();
        let plain = scaled_dot_product_attention(q.view(), kv.k.view(), kv.v.view()).unwrap();
        assert_eq!(ext, plain);
    }

    #[test]
    fn matches_concatenation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_mat(&mut rng, 4, 8);
        let own = KVPair::new(rand_mat(&mut rng, 6, 8), rand_mat(&mut rng, 6, 8), 0, 0).unwrap();
        let anc = KVPair::new(rand_mat(&mut rng, 6, 8), rand_mat(&mut rng, 6, 8), 0, 0).unwrap();
        let out = extended_attention(q.view(), &own, Some(&anc)).unwrap();
        let k = concatenate(Axis(0), &[own.k.view(), anc.k.view()]).unwrap();
        let v = concatenate(Axis(0), &[own.v.view(), anc.v.view()]).unwrap();
        let oracle = concat_oracle(&q, &k, &v);
        for (a, b) in out.iter().zip(oracle.iter()) {
            assert!((f64::from(*a) - b).abs() < 1e-6);
        }
    }

    #[test]
    fn weights_are_row_stochastic_and_doubled() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_mat(&mut rng, 5, 4);
        let own = KVPair::new(rand_mat(&mut rng, 7, 4), rand_mat(&mut rng, 7, 4), 0, 0).unwrap();
        let anc = KVPair::new(rand_mat(&mut rng, 7, 4), rand_mat(&mut rng, 7, 4), 0, 0).unwrap();
        let w = attention_weights(q.view(), &own, Some(&anc)).unwrap();
        assert_eq!(w.ncols(), 2 * own.tokens());
        for row in w.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let q = Array2::<f32>::zeros((2, 4));
        let own = KVPair::new(Array2::zeros((3, 4)), Array2::zeros((3, 4)), 0, 0).unwrap();
        let anc = KVPair::new(Array2::zeros((3, 5)), Array2::zeros((3, 5)), 0, 0).unwrap();
        assert!(matches!(
            extended_attention(q.view(), &own, Some(&anc)),
            Err(AttentionError::WidthMismatch { .. })
        ));
    }

    #[test]
    fn multi_head_concatenates_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_mat(&mut rng, 3, 8);
        let own = KVPair::new(rand_mat(&mut rng, 5, 8), rand_mat(&mut rng, 5, 8), 0, 0).unwrap();
        let anc = KVPair::new(rand_mat(&mut rng, 5, 8), rand_mat(&mut rng, 5, 8), 0, 0).unwrap();
        let out = multi_head_extended_attention(q.view(), &own, Some(&anc), 2).unwrap();
        for h in 0..2 {
            let c = s![.., h * 4..(h + 1) * 4];
            let k = concatenate(Axis(0), &[own.k.slice(c), anc.k.slice(c)]).unwrap();
            let v = concatenate(Axis(0), &[own.v.slice(c), anc.v.slice(c)]).unwrap();
            let oracle = concat_oracle(&q.slice(c).to_owned(), &k, &v);
            for (a, b) in out.slice(c).iter().zip(oracle.iter()) {
                assert!((f64::from(*a) - b).abs() < 1e-6);
            }
        }
        assert!(multi_head_extended_attention(q.view(), &own, None, 3).is_err());
    }
}
