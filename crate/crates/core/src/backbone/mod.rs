//! Bidirectional transformer denoiser over soft (mixture) token inputs.
//!
//! Inputs are [`SoftToken`]s: convex combinations of the mask embedding and a
//! sparse set of token embeddings. A hard token and a plain mask are the two
//! degenerate cases, so binary masking and soft-masking share one code path.

mod model;
pub mod params;

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

pub use model::{Backward, Forward, Model};
pub use params::{analytic_param_count, ParamLayout, ParamSpec};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::float::Float;

/// Floor applied to probabilities inside `log`.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub time_conditioned: bool,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_time_buckets")]
    pub time_buckets: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_time_buckets() -> usize {
    32
}

impl BackboneConfig {
    /// The desk default: 4 layers, 4 heads, width 128, context 128.
    pub fn desk(vocab_size: usize, time_conditioned: bool) -> Self {
        BackboneConfig {
            layers: 4,
            heads: 4,
            model_dim: 128,
            vocab_size,
            max_len: 128,
            time_conditioned,
            mlp_ratio: default_mlp_ratio(),
            time_buckets: default_time_buckets(),
        }
    }

    pub fn ff_dim(&self) -> usize {
        self.mlp_ratio * self.model_dim
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.max_len == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("backbone dimensions must be positive"));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::config("model_dim must be divisible by heads"));
        }
        if self.vocab_size < 3 {
            return Err(Error::config("vocab_size must be at least 3"));
        }
        if self.time_conditioned && self.time_buckets == 0 {
            return Err(Error::config("time_buckets must be positive"));
        }
        Ok(())
    }

    pub fn mask_id(&self) -> TokenId {
        (self.vocab_size - 1) as TokenId
    }

    /// Index of the learned time embedding used for time `t`.
    pub fn time_bucket(&self, t: f64) -> usize {
        ((t.clamp(0.0, 1.0) * self.time_buckets as f64) as usize).min(self.time_buckets - 1)
    }
}

/// One input position: `mask_weight * E[mask] + sum(w_i * E[id_i])`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftToken<F> {
    pub mask_weight: F,
    pub entries: Vec<(TokenId, F)>,
}

impl<F: Float> SoftToken<F> {
    pub fn hard(id: TokenId) -> Self {
        SoftToken { mask_weight: F::zero(), entries: vec![(id, F::one())] }
    }

    pub fn mask() -> Self {
        SoftToken { mask_weight: F::one(), entries: Vec::new() }
    }

    pub fn is_pure_mask(&self) -> bool {
        self.entries.is_empty() && self.mask_weight == F::one()
    }

    pub fn total_weight(&self) -> F {
        self.entries.iter().fold(self.mask_weight, |acc, &(_, w)| acc + w)
    }

    /// Simplex check: non-negative weights summing to one, distinct non-mask ids.
    pub fn validate(&self, mask_id: TokenId, vocab_size: usize) -> Result<()> {
        let tol = 1e-6f64.max(10.0 * F::epsilon().as_f64());
        let sum = self.total_weight().as_f64();
        if (sum - 1.0).abs() > tol {
            return Err(Error::WeightSum { sum });
        }
        if self.mask_weight < F::zero() || self.entries.iter().any(|&(_, w)| w < F::zero()) {
            return Err(Error::InvalidSoftInput("negative weight".into()));
        }
        for (i, &(id, _)) in self.entries.iter().enumerate() {
            if id == mask_id || id as usize >= vocab_size {
                return Err(Error::InvalidSoftInput(format!("token id {id} not allowed")));
            }
            if self.entries[..i].iter().any(|&(o, _)| o == id) {
                return Err(Error::InvalidSoftInput(format!("duplicate token id {id}")));
            }
        }
        Ok(())
    }
}

/// Embedding of one mixture position (sparse path).
pub fn embed_mixture<F: Float>(input: &SoftToken<F>, embeddings: ArrayView2<F>) -> Result<Array1<F>> {
    let mask_id = (embeddings.nrows() - 1) as TokenId;
    input.validate(mask_id, embeddings.nrows())?;
    let mut out = embeddings.row(mask_id as usize).to_owned() * input.mask_weight;
    for &(id, w) in &input.entries {
        out.scaled_add(w, &embeddings.row(id as usize));
    }
    Ok(out)
}

/// `-(1/t) * sum_{masked i} ln probs[i][x0[i]]`, probabilities floored at
/// [`LOG_FLOOR`].
pub fn loss<F: Float>(probs: ArrayView2<F>, x0: &[TokenId], masked: &[bool], t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::TimeOutOfRange(t));
    }
    Ok(masked_nll(probs, x0, masked) / t)
}

/// Unweighted masked negative log-likelihood.
pub fn masked_nll<F: Float>(probs: ArrayView2<F>, x0: &[TokenId], masked: &[bool]) -> f64 {
    let mut total = 0.0;
    for (i, (&tok, &m)) in x0.iter().zip(masked).enumerate() {
        if m {
            let p = probs[[i, tok as usize]].as_f64();
            if p < LOG_FLOOR {
                log::warn!("probability {p:e} at position {i} clamped to {LOG_FLOOR:e}");
            }
            total -= p.max(LOG_FLOOR).ln();
        }
    }
    total
}

pub fn check_distribution<F: Float>(p: ArrayView1<F>) -> bool {
    let sum: f64 = p.iter().map(|x| x.as_f64()).sum();
    p.iter().all(|&x| x >= F::zero()) && (sum - 1.0).abs() <= 1e-6f64.max(100.0 * F::epsilon().as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn table() -> Array2<f64> {
        Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64 * 0.1 - 0.4)
    }

    #[test]
    fn embed_degenerate_cases() {
        let e = table();
        assert_eq!(embed_mixture(&SoftToken::hard(1), e.view()).unwrap(), e.row(1));
        assert_eq!(embed_mixture(&SoftToken::<f64>::mask(), e.view()).unwrap(), e.row(4));
    }

    #[test]
    fn embed_matches_dense_product() {
        let e = table();
        let tok = SoftToken { mask_weight: 0.5, entries: vec![(0, 0.3), (1, 0.2)] };
        let mut dense = Array1::<f64>::zeros(5);
        dense[4] = 0.5;
        dense[0] = 0.3;
        dense[1] = 0.2;
        let expected = e.t().dot(&dense);
        let got = embed_mixture(&tok, e.view()).unwrap();
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn embed_rejects_bad_sum() {
        let tok = SoftToken { mask_weight: 0.5, entries: vec![(0, 0.3)] };
        assert!(matches!(embed_mixture(&tok, table().view()), Err(Error::WeightSum { .. })));
    }

    #[test]
    fn soft_token_validation() {
        assert!(SoftToken { mask_weight: 0.0, entries: vec![(4u32, 1.0f64)] }.validate(4, 5).is_err());
        assert!(SoftToken { mask_weight: 0.2, entries: vec![(1u32, 0.4f64), (1, 0.4)] }.validate(4, 5).is_err());
        assert!(SoftToken { mask_weight: 1.2, entries: vec![(1u32, -0.2f64)] }.validate(4, 5).is_err());
        assert!(SoftToken { mask_weight: 0.2, entries: vec![(1u32, 0.4f64), (2, 0.4)] }.validate(4, 5).is_ok());
    }

    #[test]
    fn loss_examples() {
        let probs = Array2::from_elem((3, 4), 0.25f64);
        assert_eq!(loss(probs.view(), &[0, 1, 2], &[false; 3], 0.5).unwrap(), 0.0);

        let mut p = Array2::from_elem((1, 4), 0.0f64);
        p[[0, 2]] = (-1.0f64).exp();
        p[[0, 0]] = 1.0 - p[[0, 2]];
        assert!((loss(p.view(), &[2], &[true], 0.5).unwrap() - 2.0).abs() < 1e-12);

        let v = 11;
        let u = Array2::from_elem((1, v), 1.0 / v as f64);
        assert!((loss(u.view(), &[3], &[true], 1.0).unwrap() - (v as f64).ln()).abs() < 1e-12);
        assert!(loss(u.view(), &[3], &[true], 0.0).is_err());
    }

    #[test]
    fn loss_floors_zero_probability() {
        let p = Array2::from_shape_vec((1, 2), vec![1.0f64, 0.0]).unwrap();
        let l = loss(p.view(), &[1], &[true], 1.0).unwrap();
        assert!((l - (-LOG_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        let mut c = BackboneConfig::desk(16, false);
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(c.validate().is_err());
    }
}
