//! Soft-mask feedback.
//!
//! A retained mask is replaced by
//! `(1 - λ) E[mask] + λ Σ π_i E[i]`, where `π` is the previous prediction
//! restricted to its top-k tokens (or tempered over the whole vocabulary) and
//! `λ = ω_s · sigmoid(ω_a (-H(p) - ω_b))`.
//!
//! The three ω values are stored unconstrained: `ω_s = sigmoid(raw_s)`,
//! `ω_a = softplus(raw_a)`, `ω_b = -softplus(raw_b)`. The temperature of the
//! full-softmax variant is `τ = softplus(raw_temp)`.

use serde::{Deserialize, Serialize};

use crate::backbone::SoftToken;
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::float::{sigmoid, softplus, softplus_inv, Float};

/// `raw_s` at initialization; `sigmoid(-4) ≈ 0.018`.
pub const INIT_RAW_S: f64 = -4.0;
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Superposition {
    TopK(usize),
    FullSoftmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TdMode {
    #[default]
    None,
    StepwiseSmToBinary,
    StepwiseBinaryToSm,
    LinearSmToBinary,
    LinearBinaryToSm,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TdConfig {
    pub mode: TdMode,
    #[serde(default)]
    pub threshold: f64,
}

impl TdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config(format!("td threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

impl std::str::FromStr for TdConfig {
    type Err = Error;

    /// Parses `mode` or `mode:threshold`, e.g. `stepwise_sm_to_binary:0.2`.
    fn from_str(s: &str) -> Result<Self> {
        let (mode, threshold) = match s.split_once(':') {
            Some((m, t)) => (m, t.parse::<f64>().map_err(|_| Error::config(format!("bad td threshold {t:?}")))?),
            None => (s, 0.0),
        };
        let mode = match mode {
            "none" => TdMode::None,
            "stepwise_sm_to_binary" => TdMode::StepwiseSmToBinary,
            "stepwise_binary_to_sm" => TdMode::StepwiseBinaryToSm,
            "linear_sm_to_binary" => TdMode::LinearSmToBinary,
            "linear_binary_to_sm" => TdMode::LinearBinaryToSm,
            other => return Err(Error::config(format!("unknown td mode {other:?}"))),
        };
        let td = TdConfig { mode, threshold };
        td.validate()?;
        Ok(td)
    }
}

/// Effective (constrained) feedback parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Effective {
    pub omega_s: f64,
    pub omega_a: f64,
    pub omega_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmParams {
    pub raw_s: f64,
    pub raw_a: f64,
    pub raw_b: f64,
    #[serde(default = "default_raw_temp")]
    pub raw_temp: f64,
    pub superposition: Superposition,
    pub p_sm: f64,
    #[serde(default)]
    pub td: TdConfig,
}

fn default_raw_temp() -> f64 {
    softplus_inv(1.0)
}

impl SmParams {
    /// Initialization from an entropy lower bound `lb < 0`: the sigmoid is
    /// centered at `lb / 2` with steepness `-10 / lb`, and `ω_s` starts near 0.
    pub fn init(lb: f64, vocab_size: usize) -> Result<Self> {
        if !(lb < 0.0) || !lb.is_finite() {
            return Err(Error::InvalidLowerBound(lb));
        }
        let k = DEFAULT_TOP_K.min(vocab_size.saturating_sub(1)).max(1);
        Ok(SmParams {
            raw_s: INIT_RAW_S,
            raw_a: softplus_inv(-10.0 / lb),
            raw_b: softplus_inv(-lb / 2.0),
            raw_temp: default_raw_temp(),
            superposition: Superposition::TopK(k),
            p_sm: 0.8,
            td: TdConfig::default(),
        })
    }

    pub fn effective(&self) -> Effective {
        Effective { omega_s: sigmoid(self.raw_s), omega_a: softplus(self.raw_a), omega_b: -softplus(self.raw_b) }
    }

    /// Inverse of [`SmParams::effective`]: `(raw_s, raw_a, raw_b)`.
    pub fn raw_from_effective(eff: Effective) -> Result<(f64, f64, f64)> {
        if !(eff.omega_s > 0.0 && eff.omega_s < 1.0) || !(eff.omega_a > 0.0) || !(eff.omega_b < 0.0) {
            return Err(Error::config(format!("effective parameters out of range: {eff:?}")));
        }
        let raw_s = (eff.omega_s / (1.0 - eff.omega_s)).ln();
        Ok((raw_s, softplus_inv(eff.omega_a), softplus_inv(-eff.omega_b)))
    }

    pub fn temperature(&self) -> f64 {
        softplus(self.raw_temp)
    }

    pub fn raw(&self) -> [f64; 4] {
        [self.raw_s, self.raw_a, self.raw_b, self.raw_temp]
    }

    pub fn set_raw(&mut self, raw: [f64; 4]) {
        [self.raw_s, self.raw_a, self.raw_b, self.raw_temp] = raw;
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.raw().iter().any(|v| !v.is_finite()) {
            return Err(Error::config("soft-mask raw parameters must be finite"));
        }
        if !(0.0..=1.0).contains(&self.p_sm) {
            return Err(Error::config(format!("p_sm {} outside [0, 1]", self.p_sm)));
        }
        match self.superposition {
            Superposition::TopK(k) if k == 0 || k >= vocab_size => {
                return Err(Error::config(format!("top-k {k} must be in 1..{vocab_size}")))
            }
            Superposition::FullSoftmax if !(self.temperature() > 0.0) => {
                return Err(Error::InvalidTemperature(self.temperature()))
            }
            _ => {}
        }
        self.td.validate()
    }
}

/// Shannon entropy in nats, `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

pub fn compute_lambda(p: &[f64], eff: Effective) -> f64 {
    lambda_from_entropy(entropy(p), eff)
}

pub fn lambda_from_entropy(h: f64, eff: Effective) -> f64 {
    eff.omega_s * sigmoid(eff.omega_a * (-h - eff.omega_b))
}

/// Top-k tokens (mask excluded; the mask is the last id) renormalized to sum
/// to one. Ties go to the lower id.
pub fn top_k_weights(p: &[f64], k: usize) -> Result<Vec<(TokenId, f64)>> {
    let candidates = p.len().saturating_sub(1);
    if k == 0 || k > candidates {
        return Err(Error::config(format!("top-k {k} must be in 1..={candidates}")));
    }
    let mut order: Vec<usize> = (0..candidates).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    order.truncate(k);
    let mass: f64 = order.iter().map(|&i| p[i]).sum();
    if !(mass > 0.0) {
        return Err(Error::DegenerateDistribution);
    }
    Ok(order.into_iter().map(|i| (i as TokenId, p[i] / mass)).collect())
}

/// Weights `∝ p_i^(1/τ)` over all non-mask tokens. Zero-weight tokens are
/// omitted.
pub fn softmax_temperature_weights(p: &[f64], tau: f64) -> Result<Vec<(TokenId, f64)>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    let candidates = &p[..p.len().saturating_sub(1)];
    let logs: Vec<(usize, f64)> =
        candidates.iter().enumerate().filter(|(_, &x)| x > 0.0).map(|(i, &x)| (i, x.ln() / tau)).collect();
    let max = logs.iter().map(|&(_, l)| l).fold(f64::NEG_INFINITY, f64::max);
    if logs.is_empty() || !max.is_finite() {
        return Err(Error::DegenerateDistribution);
    }
    let exps: Vec<(usize, f64)> = logs.into_iter().map(|(i, l)| (i, (l - max).exp())).collect();
    let z: f64 = exps.iter().map(|&(_, e)| e).sum();
    Ok(exps.into_iter().filter(|&(_, e)| e > 0.0).map(|(i, e)| (i as TokenId, e / z)).collect())
}

/// Multiplier on λ at reverse step `step` of `total` (counting down from
/// `total` to 1).
pub fn td_multiplier(step: usize, total: usize, td: &TdConfig) -> f64 {
    let (t, big_t) = (step as f64, total as f64);
    match td.mode {
        TdMode::None => 1.0,
        TdMode::StepwiseSmToBinary => f64::from(u8::from(t >= td.threshold * big_t)),
        TdMode::StepwiseBinaryToSm => f64::from(u8::from(t <= td.threshold * big_t)),
        TdMode::LinearSmToBinary => t / big_t,
        TdMode::LinearBinaryToSm => 1.0 - t / big_t,
    }
}

/// Everything computed for one retained mask, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Feedback {
    pub entropy: f64,
    /// λ after the time-dependent multiplier.
    pub lambda: f64,
    pub multiplier: f64,
    pub weights: Vec<(TokenId, f64)>,
}

impl Feedback {
    pub fn to_soft<F: Float>(&self) -> SoftToken<F> {
        if self.lambda == 0.0 {
            return SoftToken::mask();
        }
        SoftToken {
            mask_weight: F::f(1.0 - self.lambda),
            entries: self.weights.iter().map(|&(id, w)| (id, F::f(self.lambda * w))).collect(),
        }
    }
}

pub fn superposition_weights(p: &[f64], params: &SmParams) -> Result<Vec<(TokenId, f64)>> {
    match params.superposition {
        Superposition::TopK(k) => top_k_weights(p, k),
        Superposition::FullSoftmax => softmax_temperature_weights(p, params.temperature()),
    }
}

/// Feedback for a retained mask given the previous prediction `p`.
pub fn feedback(p: &[f64], params: &SmParams, multiplier: f64) -> Result<Feedback> {
    let h = entropy(p);
    let lambda = multiplier * lambda_from_entropy(h, params.effective());
    let weights = if lambda == 0.0 { Vec::new() } else { superposition_weights(p, params)? };
    Ok(Feedback { entropy: h, lambda, multiplier, weights })
}

/// SM input for one position. `revealed` is the decoded token, or `None` for
/// a mask. Revealed tokens pass through as hard inputs.
pub fn apply_sm<F: Float>(
    revealed: Option<TokenId>,
    p: &[f64],
    params: &SmParams,
    step: usize,
    total: usize,
) -> Result<SoftToken<F>> {
    match revealed {
        Some(id) => Ok(SoftToken::hard(id)),
        None => Ok(feedback(p, params, td_multiplier(step, total, &params.td))?.to_soft()),
    }
}

/// `dλ/d(raw_s, raw_a, raw_b)` at fixed entropy `h`, before the multiplier.
pub fn lambda_raw_grads(h: f64, params: &SmParams) -> [f64; 3] {
    let eff = params.effective();
    let z = eff.omega_a * (-h - eff.omega_b);
    let sz = sigmoid(z);
    let dsz = sz * (1.0 - sz);
    let d_omega_s = sz;
    let d_omega_a = eff.omega_s * dsz * (-h - eff.omega_b);
    let d_omega_b = -eff.omega_s * dsz * eff.omega_a;
    let ss = sigmoid(params.raw_s);
    [d_omega_s * ss * (1.0 - ss), d_omega_a * sigmoid(params.raw_a), d_omega_b * -sigmoid(params.raw_b)]
}

/// `d/d raw_temp` of `Σ_i g_i π_i` for tempered weights `π`, given the
/// upstream gradients `g_i` (same order as `weights`).
pub fn temperature_raw_grad(p: &[f64], weights: &[(TokenId, f64)], upstream: &[f64], params: &SmParams) -> f64 {
    let tau = params.temperature();
    let mean_log: f64 = weights.iter().map(|&(id, w)| w * p[id as usize].ln()).sum();
    // dπ_i/dβ = π_i (ln p_i - Σ π_j ln p_j), β = 1/τ
    let d_beta: f64 =
        weights.iter().zip(upstream).map(|(&(id, w), &g)| g * w * (p[id as usize].ln() - mean_log)).sum();
    d_beta * (-1.0 / (tau * tau)) * sigmoid(params.raw_temp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(omega_s: f64, omega_a: f64, omega_b: f64) -> SmParams {
        let (raw_s, raw_a, raw_b) = SmParams::raw_from_effective(Effective { omega_s, omega_a, omega_b }).unwrap();
        SmParams { raw_s, raw_a, raw_b, ..SmParams::init(-1.5, 8).unwrap() }
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((entropy(&[1.0 / 64.0; 64]) - 64f64.ln()).abs() < 1e-12);
        assert!((entropy(&[0.5, 0.5, 0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn init_values() {
        let p = SmParams::init(-1.5, 15).unwrap();
        let e = p.effective();
        assert!((e.omega_b + 0.75).abs() < 1e-12);
        assert!((e.omega_a - 10.0 / 1.5).abs() < 1e-12);
        assert!((e.omega_s - 0.017_986_209_962_091_56).abs() < 1e-12);
        assert!((p.raw_b - 0.1107).abs() < 1e-4);
        assert!(SmParams::init(0.0, 15).is_err());
        assert!(SmParams::init(0.3, 15).is_err());
        assert!((p.temperature() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_at_midpoint_and_zero_scale() {
        let p = [0.5, 0.5, 0.0];
        let pr = params(0.3, 4.0, -2f64.ln());
        assert!((compute_lambda(&p, pr.effective()) - 0.15).abs() < 1e-12);
        let zero = Effective { omega_s: 0.0, omega_a: 4.0, omega_b: -1.0 };
        assert_eq!(compute_lambda(&p, zero), 0.0);
    }

    #[test]
    fn top_k_examples() {
        let p = [0.5, 0.2, 0.1, 0.1, 0.05, 0.05, 0.0];
        let w = top_k_weights(&p, 3).unwrap();
        let ids: Vec<_> = w.iter().map(|x| x.0).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert!((w[0].1 - 0.625).abs() < 1e-12 && (w[1].1 - 0.25).abs() < 1e-12 && (w[2].1 - 0.125).abs() < 1e-12);
        assert_eq!(top_k_weights(&p, 1).unwrap(), vec![(0, 1.0)]);
        let u = [0.2; 5];
        let w = top_k_weights(&u, 3).unwrap();
        assert_eq!(w.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(top_k_weights(&[0.0, 0.0, 1.0], 1).is_err());
    }

    #[test]
    fn mask_never_selected() {
        let p = [0.1, 0.1, 0.8];
        let w = top_k_weights(&p, 2).unwrap();
        assert!(w.iter().all(|&(id, _)| id != 2));
    }

    #[test]
    fn temperature_examples() {
        let p = [0.3, 0.2, 0.1, 0.4];
        let w = softmax_temperature_weights(&p, 1.0).unwrap();
        for (i, &(id, x)) in w.iter().enumerate() {
            assert_eq!(id as usize, i);
            assert!((x - p[i] / 0.6).abs() < 1e-12);
        }
        let w = softmax_temperature_weights(&p, 1e-3).unwrap();
        assert!(w.iter().any(|&(id, x)| id == 0 && x > 0.999));
        let w = softmax_temperature_weights(&[0.9, 0.1, 0.0], 10.0).unwrap();
        assert!((w[0].1 - 0.555).abs() < 1e-3 && (w[1].1 - 0.445).abs() < 1e-3);
        assert!(softmax_temperature_weights(&p, 0.0).is_err());
        assert!(softmax_temperature_weights(&p, -1.0).is_err());
    }

    #[test]
    fn td_examples() {
        let td = TdConfig { mode: TdMode::StepwiseSmToBinary, threshold: 0.2 };
        assert_eq!(td_multiplier(90, 100, &td), 1.0);
        assert_eq!(td_multiplier(10, 100, &td), 0.0);
        let lin = TdConfig { mode: TdMode::LinearSmToBinary, threshold: 0.0 };
        assert_eq!(td_multiplier(100, 100, &lin), 1.0);
        assert!(td_multiplier(1, 100, &lin) <= 0.01);
        assert_eq!(td_multiplier(7, 9, &TdConfig::default()), 1.0);
        let parsed: TdConfig = "stepwise_binary_to_sm:0.5".parse().unwrap();
        assert_eq!(parsed, TdConfig { mode: TdMode::StepwiseBinaryToSm, threshold: 0.5 });
        assert!("linear:0.5".parse::<TdConfig>().is_err());
    }

    #[test]
    fn apply_sm_passes_revealed_through() {
        let p = [0.25; 4];
        let pr = params(0.9, 1.0, -0.1);
        assert_eq!(apply_sm::<f64>(Some(1), &p, &pr, 3, 4).unwrap(), SoftToken::hard(1));
    }

    #[test]
    fn lambda_grads_match_finite_differences() {
        let pr = params(0.3, 2.5, -0.9);
        let h = 0.7;
        let g = lambda_raw_grads(h, &pr);
        let eps = 1e-6;
        for i in 0..3 {
            let mut hi = pr.clone();
            let mut lo = pr.clone();
            let mut r = pr.raw();
            r[i] += eps;
            hi.set_raw(r);
            r[i] -= 2.0 * eps;
            lo.set_raw(r);
            let num = (lambda_from_entropy(h, hi.effective()) - lambda_from_entropy(h, lo.effective())) / (2.0 * eps);
            assert!((num - g[i]).abs() < 1e-8, "{i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn temperature_grad_matches_finite_differences() {
        let p = [0.5, 0.3, 0.15, 0.05, 0.0];
        let up = [0.3, -1.0, 2.0, 0.5];
        let mut pr = SmParams::init(-1.5, 5).unwrap();
        pr.superposition = Superposition::FullSoftmax;
        pr.raw_temp = 0.4;
        let f = |pr: &SmParams| -> f64 {
            let w = softmax_temperature_weights(&p, pr.temperature()).unwrap();
            w.iter().map(|&(id, x)| up[id as usize] * x).sum()
        };
        let w = softmax_temperature_weights(&p, pr.temperature()).unwrap();
        let ups: Vec<f64> = w.iter().map(|&(id, _)| up[id as usize]).collect();
        let g = temperature_raw_grad(&p, &w, &ups, &pr);
        let eps = 1e-6;
        let (mut hi, mut lo) = (pr.clone(), pr.clone());
        hi.raw_temp += eps;
        lo.raw_temp -= eps;
        let num = (f(&hi) - f(&lo)) / (2.0 * eps);
        assert!((num - g).abs() < 1e-8, "{num} vs {g}");
    }
}
