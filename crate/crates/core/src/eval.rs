//! Validation bound, sample diagnostics and soft-mask telemetry.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::corpus::{grammar_check, GrammarSpec, TokenId};
use crate::decoding::{decode_batch, DecodeConfig};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::schedule::{corrupt, LinearSchedule};
use crate::softmask::{Effective, SmParams};
use crate::training::{first_pass, second_pass, sequence_losses, StepDraw};

/// Sequences per forward pass during evaluation.
const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NelboEstimate {
    /// Mean of `(1/t) Σ_masked -ln p / L` over all draws.
    pub per_token: f64,
    pub std_error: f64,
    pub draws: usize,
}

/// Monte-Carlo estimate of the per-token NELBO on `windows` with
/// `t ~ U(0, 1)`. Each window is corrupted `mc_samples` times. With `sm_on`
/// the forward is two-pass as in training. The soft-mask branch consumes no
/// randomness, so the same RNG seed gives common corruptions across arms.
pub fn validation_nelbo<F: Float, R: Rng + ?Sized>(
    model: &Model<F>,
    sm: &SmParams,
    windows: &[Vec<TokenId>],
    mc_samples: usize,
    sm_on: bool,
    rng: &mut R,
) -> Result<NelboEstimate> {
    if mc_samples == 0 {
        return Err(Error::config("mc_samples must be at least 1"));
    }
    if windows.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mask_id = model.config.mask_id();
    let jobs: Vec<&Vec<TokenId>> = (0..mc_samples).flat_map(|_| windows.iter()).collect();
    let mut values = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(EVAL_BATCH) {
        let x0: Vec<Vec<TokenId>> = chunk.iter().map(|w| (*w).clone()).collect();
        let mut times = Vec::with_capacity(x0.len());
        let mut xt = Vec::with_capacity(x0.len());
        let mut masked = Vec::with_capacity(x0.len());
        for seq in &x0 {
            let t = rng.random::<f64>();
            let (x, m) = corrupt(&LinearSchedule, seq, t, mask_id, rng)?;
            times.push(t);
            xt.push(x);
            masked.push(m);
        }
        let draw = StepDraw { x0, times, xt, masked, sm_active: sm_on };
        let p_tilde = if sm_on { Some(first_pass(model, &draw)?) } else { None };
        let probs = second_pass(model, sm, &draw, p_tilde.as_ref())?;
        values.extend(sequence_losses(&probs, &draw));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(NelboEstimate { per_token: mean, std_error: (var / n).sqrt(), draws: values.len() })
}

/// Seed of sample `index` in an evaluation seeded with `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    // SplitMix64 finalizer over the pair.
    let mut z = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Unconditional samples; sample `j` is decoded with `sample_seed(config.seed, j)`.
pub fn generate_samples<F: Float>(
    model: &Model<F>,
    sm: &SmParams,
    config: &DecodeConfig,
    n_samples: usize,
) -> Result<Vec<Vec<TokenId>>> {
    if n_samples == 0 {
        return Err(Error::config("n_samples must be at least 1"));
    }
    let seeds: Vec<u64> = (0..n_samples as u64).map(|j| sample_seed(config.seed, j)).collect();
    let mut out = Vec::with_capacity(n_samples);
    for chunk in seeds.chunks(EVAL_BATCH) {
        out.extend(decode_batch(&[], model, sm, config, chunk)?.sequences);
    }
    Ok(out)
}

pub fn validity_of(samples: &[Vec<TokenId>], spec: &GrammarSpec) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|s| grammar_check(s, spec)).count() as f64 / samples.len() as f64
}

pub fn grammar_validity_rate<F: Float>(
    model: &Model<F>,
    sm: &SmParams,
    spec: &GrammarSpec,
    n_samples: usize,
    config: &DecodeConfig,
) -> Result<f64> {
    Ok(validity_of(&generate_samples(model, sm, config, n_samples)?, spec))
}

fn bigram_table(corpus: &[Vec<TokenId>], vocab_size: usize) -> Vec<f64> {
    let mut counts = vec![1.0; vocab_size * vocab_size];
    for seq in corpus {
        for w in seq.windows(2) {
            counts[w[0] as usize * vocab_size + w[1] as usize] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    counts.iter_mut().for_each(|c| *c /= total);
    counts
}

/// `KL(reference ‖ generated)` between add-one smoothed bigram distributions.
pub fn bigram_divergence(generated: &[Vec<TokenId>], reference: &[Vec<TokenId>], vocab_size: usize) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(&bad) = generated.iter().chain(reference).flatten().find(|&&t| t as usize >= vocab_size) {
        return Err(Error::config(format!("token id {bad} outside vocabulary of size {vocab_size}")));
    }
    let p = bigram_table(reference, vocab_size);
    let q = bigram_table(generated, vocab_size);
    Ok(p.iter().zip(&q).map(|(&a, &b)| a * (a / b).ln()).sum::<f64>().max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmTrace {
    /// Effective parameters before the first update.
    pub initial: Effective,
    pub steps: Vec<u64>,
    pub series: Vec<Effective>,
}

impl SmTrace {
    pub fn final_value(&self) -> Effective {
        self.series.last().copied().unwrap_or(self.initial)
    }
}

/// Series of effective soft-mask parameters from a metrics stream.
pub fn sm_trace_summary(initial: Effective, rows: &[crate::training::MetricsRow]) -> SmTrace {
    SmTrace {
        initial,
        steps: rows.iter().map(|r| r.step).collect(),
        series: rows.iter().map(|r| Effective { omega_s: r.omega_s, omega_a: r.omega_a, omega_b: r.omega_b }).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nelbo_per_masked_token: f64,
    pub nelbo_std_error: f64,
    pub perplexity: f64,
    pub grammar_validity_rate: f64,
    pub bigram_kl: f64,
    pub sm_scale_effective: f64,
    pub sm_on: bool,
    pub mc_samples: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn all_finite(&self) -> bool {
        [
            self.nelbo_per_masked_token,
            self.nelbo_std_error,
            self.perplexity,
            self.grammar_validity_rate,
            self.bigram_kl,
            self.sm_scale_effective,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub struct EvalInputs<'a> {
    pub validation: &'a [Vec<TokenId>],
    pub spec: &'a GrammarSpec,
    pub decode: &'a DecodeConfig,
    pub mc_samples: usize,
    pub n_samples: usize,
    pub sm_on: bool,
    pub seed: u64,
    pub fingerprint: String,
}

pub fn evaluate<F: Float>(model: &Model<F>, sm: &SmParams, inputs: EvalInputs<'_>) -> Result<EvalReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(inputs.seed);
    let nelbo = validation_nelbo(model, sm, inputs.validation, inputs.mc_samples, inputs.sm_on, &mut rng)?;
    let mut decode = inputs.decode.clone();
    decode.sm_enabled = inputs.sm_on;
    decode.seed = inputs.seed;
    let samples = generate_samples(model, sm, &decode, inputs.n_samples)?;
    let bigram_kl = bigram_divergence(&samples, inputs.validation, model.config.vocab_size)?;
    Ok(EvalReport {
        nelbo_per_masked_token: nelbo.per_token,
        nelbo_std_error: nelbo.std_error,
        perplexity: nelbo.per_token.exp(),
        grammar_validity_rate: validity_of(&samples, inputs.spec),
        bigram_kl,
        sm_scale_effective: sm.effective().omega_s,
        sm_on: inputs.sm_on,
        mc_samples: inputs.mc_samples,
        n_samples: inputs.n_samples,
        seed: inputs.seed,
        fingerprint: inputs.fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_divergence_is_zero() {
        let c: Vec<Vec<TokenId>> = (0..200).map(|i| (0..50).map(|j| ((i + j * j) % 7) as u32).collect()).collect();
        assert!(bigram_divergence(&c, &c, 8).unwrap() < 1e-12);
        let mut shuffled = c.clone();
        shuffled.reverse();
        assert_eq!(bigram_divergence(&shuffled, &c, 8).unwrap(), bigram_divergence(&c, &c, 8).unwrap());
    }

    #[test]
    fn divergence_rejects_empty() {
        assert!(bigram_divergence(&[], &[vec![1, 2]], 4).is_err());
    }

    #[test]
    fn sample_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..1000).map(|j| sample_seed(7, j)).collect();
        assert_eq!(s.len(), 1000);
        assert_ne!(sample_seed(1, 0), sample_seed(0, 1));
    }
}
