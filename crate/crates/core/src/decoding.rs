//! Iterative reverse process.
//!
//! Decoding walks the grid `t = i / T` for `i = T..1`. Every step runs one
//! forward pass, chooses positions to reveal, samples their tokens and, for the
//! positions that stay masked, stores soft-mask feedback for the next step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Model, SoftToken};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::schedule::{grid_time, LinearSchedule, NoiseSchedule};
use crate::softmask::{self, entropy, Feedback, SmParams, TdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ScheduleRandom,
    EntropyCount,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "schedule_random" => Ok(Strategy::ScheduleRandom),
            "entropy_count" => Ok(Strategy::EntropyCount),
            _ => Err(Error::config(format!("unknown strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sampler {
    Argmax,
    Nucleus { temperature: f64, top_p: f64 },
}

impl Sampler {
    pub fn validate(&self) -> Result<()> {
        if let Sampler::Nucleus { temperature, top_p } = *self {
            if !(temperature > 0.0) || !temperature.is_finite() {
                return Err(Error::InvalidTemperature(temperature));
            }
            if !(top_p > 0.0 && top_p <= 1.0) {
                return Err(Error::config(format!("top_p {top_p} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub length: usize,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub nfe_budget: Option<f64>,
    pub strategy: Strategy,
    pub sampler: Sampler,
    pub sm_enabled: bool,
    #[serde(default)]
    pub td: TdConfig,
    #[serde(default)]
    pub seed: u64,
}

impl DecodeConfig {
    pub fn new(length: usize, steps: usize, strategy: Strategy, sampler: Sampler, sm_enabled: bool) -> Self {
        DecodeConfig {
            length,
            steps: Some(steps),
            nfe_budget: None,
            strategy,
            sampler,
            sm_enabled,
            td: TdConfig::default(),
            seed: 0,
        }
    }

    /// Number of reverse steps after resolving a budget.
    pub fn total_steps(&self) -> Result<usize> {
        match (self.steps, self.nfe_budget) {
            (Some(_), Some(_)) => Err(Error::config("steps and nfe_budget are mutually exclusive")),
            (Some(0), None) => Err(Error::config("steps must be positive")),
            (Some(s), None) => Ok(s),
            (None, Some(b)) => steps_from_budget(b, self.length),
            (None, None) => Ok(self.length),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::config("length must be positive"));
        }
        let steps = self.total_steps()?;
        if self.strategy == Strategy::EntropyCount && steps > self.length {
            return Err(Error::config(format!("entropy_count needs steps <= length, got {steps} > {}", self.length)));
        }
        self.sampler.validate()?;
        self.td.validate()
    }
}

/// `round(budget * len)`, at least one step.
pub fn steps_from_budget(budget: f64, len: usize) -> Result<usize> {
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::config(format!("nfe budget {budget} outside (0, 1]")));
    }
    Ok(((budget * len as f64).round() as usize).max(1))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Position {
    Revealed(TokenId),
    /// Masked, optionally carrying feedback from the previous step.
    Masked(Option<Feedback>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceState {
    pub positions: Vec<Position>,
    pub prompt_len: usize,
}

impl SequenceState {
    pub fn new(prompt: &[TokenId], len: usize) -> Self {
        let mut positions: Vec<Position> = prompt.iter().map(|&t| Position::Revealed(t)).collect();
        positions.extend((0..len).map(|_| Position::Masked(None)));
        SequenceState { positions, prompt_len: prompt.len() }
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (self.prompt_len..self.positions.len()).filter(|&i| matches!(self.positions[i], Position::Masked(_))).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.positions.iter().filter(|p| matches!(p, Position::Masked(_))).count()
    }

    pub fn inputs<F: Float>(&self) -> Vec<SoftToken<F>> {
        self.positions
            .iter()
            .map(|p| match p {
                Position::Revealed(t) => SoftToken::hard(*t),
                Position::Masked(None) => SoftToken::mask(),
                Position::Masked(Some(fb)) => fb.to_soft(),
            })
            .collect()
    }

    /// Tokens after the prompt. Masked positions (only possible mid-decode)
    /// are reported as `mask_id`.
    pub fn generated(&self, mask_id: TokenId) -> Vec<TokenId> {
        self.positions[self.prompt_len..]
            .iter()
            .map(|p| match p {
                Position::Revealed(t) => *t,
                Position::Masked(_) => mask_id,
            })
            .collect()
    }
}

/// Draws a token from `p` with the mask (last id) excluded.
pub fn sample_token<R: Rng + ?Sized>(p: &[f64], sampler: &Sampler, rng: &mut R) -> Result<TokenId> {
    let cand = &p[..p.len().saturating_sub(1)];
    match *sampler {
        Sampler::Argmax => {
            let mut best: Option<usize> = None;
            for (i, &x) in cand.iter().enumerate() {
                if best.is_none_or(|b| x > cand[b]) {
                    best = Some(i);
                }
            }
            best.map(|b| b as TokenId).ok_or(Error::EmptyNucleus)
        }
        Sampler::Nucleus { temperature, top_p } => {
            let support = nucleus(cand, temperature, top_p)?;
            let total: f64 = support.iter().map(|&(_, w)| w).sum();
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            for &(id, w) in &support {
                acc += w;
                if u < acc {
                    return Ok(id);
                }
            }
            Ok(support.last().expect("non-empty nucleus").0)
        }
    }
}

/// Tempered, truncated distribution: the smallest prefix of tokens sorted by
/// probability whose mass reaches `top_p`, renormalized.
pub fn nucleus(cand: &[f64], temperature: f64, top_p: f64) -> Result<Vec<(TokenId, f64)>> {
    let logs: Vec<(usize, f64)> =
        cand.iter().enumerate().filter(|(_, &x)| x > 0.0).map(|(i, &x)| (i, x.ln() / temperature)).collect();
    if logs.is_empty() {
        return Err(Error::EmptyNucleus);
    }
    let max = logs.iter().map(|&(_, l)| l).fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<(usize, f64)> = logs.into_iter().map(|(i, l)| (i, (l - max).exp())).collect();
    let z: f64 = w.iter().map(|&(_, x)| x).sum();
    w.iter_mut().for_each(|(_, x)| *x /= z);
    w.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut acc = 0.0;
    let mut keep = 0;
    for &(_, x) in &w {
        acc += x;
        keep += 1;
        if acc >= top_p {
            break;
        }
    }
    w.truncate(keep);
    let z: f64 = w.iter().map(|&(_, x)| x).sum();
    Ok(w.into_iter().map(|(i, x)| (i as TokenId, x / z)).collect())
}

/// Each masked non-prompt position independently, with probability
/// `reveal_probability(s, t)`.
pub fn select_reveals_random<R: Rng + ?Sized>(state: &SequenceState, s: f64, t: f64, rng: &mut R) -> Result<Vec<usize>> {
    let q = LinearSchedule.reveal_probability(s, t)?;
    Ok(state.masked_positions().into_iter().filter(|_| rng.random::<f64>() < q).collect())
}

/// Reveal count for a step with `steps_left` steps remaining (this one
/// included).
pub fn entropy_reveal_count(remaining: usize, steps_left: usize) -> usize {
    remaining.div_ceil(steps_left.max(1))
}

/// The `ceil(remaining / steps_left)` masked positions with the lowest
/// entropy; ties go to the earlier position. `probs(i)` is position `i`'s
/// prediction.
pub fn select_reveals_entropy<'a>(
    state: &SequenceState,
    probs: impl Fn(usize) -> &'a [f64],
    steps_left: usize,
) -> Vec<usize> {
    let masked = state.masked_positions();
    let n = entropy_reveal_count(masked.len(), steps_left);
    let mut scored: Vec<(f64, usize)> = masked.into_iter().map(|i| (entropy(probs(i)), i)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut chosen: Vec<usize> = scored.into_iter().take(n).map(|(_, i)| i).collect();
    chosen.sort_unstable();
    chosen
}

/// Per-step statistics, summed or averaged over the decoded batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub t: f64,
    pub revealed: usize,
    pub masked_after: usize,
    pub mean_lambda: f64,
    pub max_lambda: f64,
    pub mean_entropy: f64,
}

/// One reverse step (`i` counts down from `total` to 1) on a batch of
/// equal-length states, each with its own RNG.
#[allow(clippy::too_many_arguments)]
pub fn decode_step<F: Float>(
    states: &mut [SequenceState],
    rngs: &mut [ChaCha8Rng],
    model: &Model<F>,
    sm: &SmParams,
    config: &DecodeConfig,
    i: usize,
    total: usize,
) -> Result<TraceRecord> {
    let (s, t) = (grid_time(i - 1, total), grid_time(i, total));
    let inputs: Vec<Vec<SoftToken<F>>> = states.iter().map(SequenceState::inputs).collect();
    let times = vec![t; states.len()];
    let out = model.predict(&inputs, model.config.time_conditioned.then_some(&times[..]))?;
    let probs = out.probs.mapv(|v| v.as_f64());
    let len = out.len;
    let multiplier = softmask::td_multiplier(i, total, &config.td);

    let (mut revealed, mut masked_after) = (0, 0);
    let (mut lambda_sum, mut lambda_max, mut n_lambda) = (0.0f64, 0.0f64, 0usize);
    let (mut ent_sum, mut n_ent) = (0.0, 0usize);
    for (b, (state, rng)) in states.iter_mut().zip(rngs.iter_mut()).enumerate() {
        let row = |l: usize| probs.row(b * len + l).to_slice().expect("contiguous rows");
        for l in state.masked_positions() {
            ent_sum += entropy(row(l));
            n_ent += 1;
        }
        let chosen = match config.strategy {
            Strategy::ScheduleRandom => select_reveals_random(state, s, t, rng)?,
            Strategy::EntropyCount => select_reveals_entropy(state, row, i),
        };
        for &l in &chosen {
            let tok = sample_token(row(l), &config.sampler, rng)?;
            state.positions[l] = Position::Revealed(tok);
        }
        revealed += chosen.len();
        for l in state.masked_positions() {
            let fb = if config.sm_enabled { Some(softmask::feedback(row(l), sm, multiplier)?) } else { None };
            if let Some(f) = &fb {
                lambda_sum += f.lambda;
                lambda_max = lambda_max.max(f.lambda);
                n_lambda += 1;
            }
            state.positions[l] = Position::Masked(fb);
            masked_after += 1;
        }
    }
    Ok(TraceRecord {
        step: total - i + 1,
        t,
        revealed,
        masked_after,
        mean_lambda: if n_lambda > 0 { lambda_sum / n_lambda as f64 } else { 0.0 },
        max_lambda: lambda_max,
        mean_entropy: if n_ent > 0 { ent_sum / n_ent as f64 } else { 0.0 },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub sequences: Vec<Vec<TokenId>>,
    pub trace: Vec<TraceRecord>,
}

/// Decodes one sequence per seed, all sharing `prompt`. Sample `j` uses an RNG
/// seeded with `seeds[j]`.
pub fn decode_batch<F: Float>(
    prompt: &[TokenId],
    model: &Model<F>,
    sm: &SmParams,
    config: &DecodeConfig,
    seeds: &[u64],
) -> Result<Decoded> {
    config.validate()?;
    let total = config.total_steps()?;
    let full = prompt.len() + config.length;
    if full > model.config.max_len {
        return Err(Error::LengthOverflow { len: full, max_len: model.config.max_len });
    }
    let mask_id = model.config.mask_id();
    if let Some(&bad) = prompt.iter().find(|&&t| t == mask_id || t as usize >= model.config.vocab_size) {
        return Err(Error::config(format!("prompt token {bad} not allowed")));
    }
    let mut states: Vec<SequenceState> = seeds.iter().map(|_| SequenceState::new(prompt, config.length)).collect();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut trace = Vec::with_capacity(total);
    for i in (1..=total).rev() {
        trace.push(decode_step(&mut states, &mut rngs, model, sm, config, i, total)?);
    }
    debug_assert!(states.iter().all(|s| s.masked_count() == 0));
    Ok(Decoded { sequences: states.iter().map(|s| s.generated(mask_id)).collect(), trace })
}

/// Decodes a single sequence with `config.seed`.
pub fn decode<F: Float>(
    prompt: Option<&[TokenId]>,
    model: &Model<F>,
    sm: &SmParams,
    config: &DecodeConfig,
) -> Result<(Vec<TokenId>, Vec<TraceRecord>)> {
    let out = decode_batch(prompt.unwrap_or(&[]), model, sm, config, &[config.seed])?;
    Ok((out.sequences.into_iter().next().expect("one sample"), out.trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_examples() {
        assert_eq!(steps_from_budget(0.25, 768).unwrap(), 192);
        assert_eq!(steps_from_budget(1.0, 512).unwrap(), 512);
        assert_eq!(steps_from_budget(0.5, 10).unwrap(), 5);
        assert_eq!(steps_from_budget(0.01, 10).unwrap(), 1);
        assert!(steps_from_budget(0.0, 10).is_err());
        assert!(steps_from_budget(1.5, 10).is_err());
    }

    #[test]
    fn argmax_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_token(&[0.1, 0.7, 0.2, 0.0], &Sampler::Argmax, &mut rng).unwrap(), 1);
        // Mask mass is ignored.
        assert_eq!(sample_token(&[0.1, 0.2, 0.7], &Sampler::Argmax, &mut rng).unwrap(), 1);
    }

    #[test]
    fn nucleus_support() {
        let w = nucleus(&[0.5, 0.3, 0.15, 0.05], 1.0, 0.9).unwrap();
        assert_eq!(w.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!((w[0].1 - 0.5 / 0.95).abs() < 1e-12);
        assert!(matches!(nucleus(&[0.0, 0.0], 1.0, 0.9), Err(Error::EmptyNucleus)));
    }

    #[test]
    fn cold_temperature_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = [0.25, 0.35, 0.2, 0.2, 0.0];
        let s = Sampler::Nucleus { temperature: 1e-3, top_p: 0.9 };
        for _ in 0..10_000 {
            assert_eq!(sample_token(&p, &s, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn entropy_schedule() {
        assert_eq!(entropy_reveal_count(512, 128), 4);
        assert_eq!(entropy_reveal_count(5, 2), 3);
        assert_eq!(entropy_reveal_count(2, 1), 2);
    }

    #[test]
    fn entropy_selection_ties_by_position() {
        let state = SequenceState::new(&[], 4);
        let flat = [0.5, 0.5, 0.0];
        let sharp = [1.0, 0.0, 0.0];
        let rows = [&flat[..], &sharp[..], &flat[..], &sharp[..]];
        assert_eq!(select_reveals_entropy(&state, |i| rows[i], 2), vec![1, 3]);
        assert_eq!(select_reveals_entropy(&state, |_| &flat[..], 4), vec![0]);
    }

    #[test]
    fn random_selection_last_step_takes_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut state = SequenceState::new(&[1, 2], 5);
        assert_eq!(select_reveals_random(&state, 0.0, 0.25, &mut rng).unwrap(), vec![2, 3, 4, 5, 6]);
        for p in &mut state.positions {
            *p = Position::Revealed(0);
        }
        assert!(select_reveals_random(&state, 0.5, 0.75, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn random_selection_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let state = SequenceState::new(&[], n);
        let k = select_reveals_random(&state, 0.75, 1.0, &mut rng).unwrap().len();
        let frac = k as f64 / n as f64;
        assert!((frac - 0.25).abs() < 3.0 * (0.25f64 * 0.75 / n as f64).sqrt(), "{frac}");
    }

    #[test]
    fn config_conflicts() {
        let mut c = DecodeConfig::new(10, 5, Strategy::EntropyCount, Sampler::Argmax, false);
        assert_eq!(c.total_steps().unwrap(), 5);
        c.nfe_budget = Some(0.5);
        assert!(c.validate().is_err());
        c.steps = None;
        assert_eq!(c.total_steps().unwrap(), 5);
        c.nfe_budget = None;
        c.steps = Some(11);
        assert!(c.validate().is_err());
    }
}
