//! Two-pass soft-mask training.
//!
//! Each step samples a time per sequence, corrupts the batch and, with
//! probability `p_sm`, first runs a gradient-free pass on the binary-masked
//! batch. Its predictions `p̃` (held constant) build the soft-mask inputs of the
//! gradient-carrying pass. The objective is the `1/t`-weighted masked negative
//! log-likelihood, averaged per token.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Model, SoftToken, LOG_FLOOR};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::schedule::{corrupt, LinearSchedule};
use crate::softmask::{self, Feedback, SmParams, Superposition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSampling {
    #[default]
    PerSequence,
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub b_l: f64,
    #[serde(default = "one")]
    pub b_h: f64,
    pub lr_backbone: f64,
    #[serde(default = "default_lr_sm")]
    pub lr_sm: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub grad_clip_norm: Option<f64>,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub time_sampling: TimeSampling,
}

fn one() -> f64 {
    1.0
}

fn default_lr_sm() -> f64 {
    1e-2
}

impl TrainConfig {
    pub fn new(lr_backbone: f64, batch_size: usize, total_steps: usize, seed: u64) -> Self {
        TrainConfig {
            b_l: 0.0,
            b_h: 1.0,
            lr_backbone,
            lr_sm: default_lr_sm(),
            batch_size,
            total_steps,
            seed,
            grad_clip_norm: None,
            warmup_steps: 0,
            time_sampling: TimeSampling::PerSequence,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.b_l && self.b_l < self.b_h && self.b_h <= 1.0) {
            return Err(Error::config(format!("need 0 <= b_l < b_h <= 1, got ({}, {})", self.b_l, self.b_h)));
        }
        if !(self.lr_backbone > 0.0 && self.lr_sm > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip_norm must be positive"));
            }
        }
        Ok(())
    }
}

pub fn sample_time<R: Rng + ?Sized>(b_l: f64, b_h: f64, rng: &mut R) -> f64 {
    b_l + (b_h - b_l) * rng.random::<f64>()
}

/// The random choices of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraw {
    pub x0: Vec<Vec<TokenId>>,
    pub times: Vec<f64>,
    pub xt: Vec<Vec<TokenId>>,
    pub masked: Vec<Vec<bool>>,
    pub sm_active: bool,
}

impl StepDraw {
    pub fn masked_count(&self) -> usize {
        self.masked.iter().flatten().filter(|&&m| m).count()
    }

    /// Binary-masked model inputs.
    pub fn binary_inputs<F: Float>(&self, mask_id: TokenId) -> Vec<Vec<SoftToken<F>>> {
        self.xt
            .iter()
            .map(|seq| seq.iter().map(|&x| if x == mask_id { SoftToken::mask() } else { SoftToken::hard(x) }).collect())
            .collect()
    }
}

pub fn draw_step<R: Rng + ?Sized>(
    batch: &[Vec<TokenId>],
    config: &TrainConfig,
    p_sm: f64,
    mask_id: TokenId,
    rng: &mut R,
) -> Result<StepDraw> {
    let times: Vec<f64> = match config.time_sampling {
        TimeSampling::PerSequence => batch.iter().map(|_| sample_time(config.b_l, config.b_h, rng)).collect(),
        TimeSampling::PerBatch => vec![sample_time(config.b_l, config.b_h, rng); batch.len()],
    };
    let mut xt = Vec::with_capacity(batch.len());
    let mut masked = Vec::with_capacity(batch.len());
    for (seq, &t) in batch.iter().zip(&times) {
        let (x, m) = corrupt(&LinearSchedule, seq, t, mask_id, rng)?;
        xt.push(x);
        masked.push(m);
    }
    let sm_active = rng.random::<f64>() < p_sm;
    Ok(StepDraw { x0: batch.to_vec(), times, xt, masked, sm_active })
}

/// Gradient-free first pass: `p̃` for every position, as `f64` rows.
pub fn first_pass<F: Float>(model: &Model<F>, draw: &StepDraw) -> Result<Array2<f64>> {
    let inputs = draw.binary_inputs::<F>(model.config.mask_id());
    let out = model.predict(&inputs, time_arg(model, &draw.times))?;
    Ok(out.probs.mapv(|v| v.as_f64()))
}

pub(crate) fn time_arg<'a, F>(model: &Model<F>, times: &'a [f64]) -> Option<&'a [f64]> {
    model.config.time_conditioned.then_some(times)
}

/// Second-pass inputs: retained masks get feedback built from `p̃`.
pub fn sm_inputs<F: Float>(
    draw: &StepDraw,
    p_tilde: &Array2<f64>,
    sm: &SmParams,
    mask_id: TokenId,
) -> Result<(Vec<Vec<SoftToken<F>>>, Vec<Vec<Option<Feedback>>>)> {
    let len = draw.xt.first().map_or(0, Vec::len);
    let mut inputs = Vec::with_capacity(draw.xt.len());
    let mut feedback = Vec::with_capacity(draw.xt.len());
    for (b, seq) in draw.xt.iter().enumerate() {
        let mut row_in = Vec::with_capacity(len);
        let mut row_fb = Vec::with_capacity(len);
        for (l, &x) in seq.iter().enumerate() {
            if x == mask_id {
                let p = p_tilde.row(b * len + l);
                let fb = softmask::feedback(p.as_slice().expect("contiguous rows"), sm, 1.0)?;
                row_in.push(fb.to_soft());
                row_fb.push(Some(fb));
            } else {
                row_in.push(SoftToken::hard(x));
                row_fb.push(None);
            }
        }
        inputs.push(row_in);
        feedback.push(row_fb);
    }
    Ok((inputs, feedback))
}

#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub backbone: Vec<F>,
    /// `(raw_s, raw_a, raw_b, raw_temp)`.
    pub sm: [f64; 4],
}

/// Per-sequence `(1/t) Σ_masked -ln p / L`; zero when nothing is masked.
pub fn sequence_losses<F: Float>(probs: &Array2<F>, draw: &StepDraw) -> Vec<f64> {
    let len = draw.x0[0].len();
    draw.x0
        .iter()
        .zip(&draw.masked)
        .zip(&draw.times)
        .enumerate()
        .map(|(b, ((x0, m), &t))| {
            if !m.iter().any(|&v| v) {
                return 0.0;
            }
            let rows = probs.slice(ndarray::s![b * len..(b + 1) * len, ..]);
            crate::backbone::masked_nll(rows, x0, m) / t / len as f64
        })
        .collect()
}

fn batch_objective<F: Float>(probs: &Array2<F>, draw: &StepDraw) -> f64 {
    sequence_losses(probs, draw).iter().sum::<f64>() / draw.x0.len() as f64
}

/// Second-pass model inputs: soft-mask feedback when `draw.sm_active`,
/// binary masks otherwise.
pub fn second_pass_inputs<F: Float>(
    model: &Model<F>,
    sm: &SmParams,
    draw: &StepDraw,
    p_tilde: Option<&Array2<f64>>,
) -> Result<(Vec<Vec<SoftToken<F>>>, Option<Vec<Vec<Option<Feedback>>>>)> {
    let mask_id = model.config.mask_id();
    match (draw.sm_active, p_tilde) {
        (true, Some(pt)) => {
            let (i, f) = sm_inputs(draw, pt, sm, mask_id)?;
            Ok((i, Some(f)))
        }
        (true, None) => Err(Error::config("soft-mask pass requires first-pass probabilities")),
        (false, _) => Ok((draw.binary_inputs(mask_id), None)),
    }
}

/// Second-pass probabilities without gradients.
pub fn second_pass<F: Float>(
    model: &Model<F>,
    sm: &SmParams,
    draw: &StepDraw,
    p_tilde: Option<&Array2<f64>>,
) -> Result<Array2<F>> {
    let (inputs, _) = second_pass_inputs(model, sm, draw, p_tilde)?;
    Ok(model.predict(&inputs, time_arg(model, &draw.times))?.probs)
}

/// Loss of the gradient-carrying pass. `p_tilde` must be supplied when
/// `draw.sm_active` is set; it is treated as a constant.
pub fn objective<F: Float>(model: &Model<F>, sm: &SmParams, draw: &StepDraw, p_tilde: Option<&Array2<f64>>) -> Result<f64> {
    Ok(batch_objective(&second_pass(model, sm, draw, p_tilde)?, draw))
}

/// Loss and gradients with respect to backbone and raw soft-mask parameters.
pub fn objective_and_grads<F: Float>(
    model: &Model<F>,
    sm: &SmParams,
    draw: &StepDraw,
    p_tilde: Option<&Array2<f64>>,
) -> Result<(f64, Gradients<F>)> {
    let mask_id = model.config.mask_id();
    let (inputs, feedback) = second_pass_inputs(model, sm, draw, p_tilde)?;
    let fwd = model.forward(&inputs, time_arg(model, &draw.times))?;
    let loss = batch_objective(&fwd.probs, draw);

    // d objective / d logits = scale * (p - onehot) at masked positions.
    let len = fwd.len;
    let batch = draw.x0.len() as f64;
    let mut dlogits = Array2::<F>::zeros(fwd.probs.raw_dim());
    for (b, ((x0, m), &t)) in draw.x0.iter().zip(&draw.masked).zip(&draw.times).enumerate() {
        let scale = F::f(1.0 / (t * len as f64 * batch));
        for l in 0..len {
            let r = b * len + l;
            let y = x0[l] as usize;
            if !m[l] || fwd.probs[[r, y]].as_f64() < LOG_FLOOR {
                continue;
            }
            let mut row = dlogits.row_mut(r);
            row.assign(&fwd.probs.row(r));
            row[y] -= F::one();
            row.mapv_inplace(|v| v * scale);
        }
    }
    let back = model.backward(&fwd, &inputs, &dlogits);

    let mut sm_grad = [0.0; 4];
    if let (Some(feedback), Some(pt)) = (feedback, p_tilde) {
        let emb = model.token_embeddings();
        let mask_row = emb.row(mask_id as usize);
        for (b, row_fb) in feedback.iter().enumerate() {
            for (l, fb) in row_fb.iter().enumerate() {
                let Some(fb) = fb else { continue };
                if fb.lambda == 0.0 {
                    continue;
                }
                let d_in = back.d_input.row(b * len + l);
                let dot = |e: ndarray::ArrayView1<F>| -> f64 { e.iter().zip(d_in.iter()).map(|(&a, &g)| a.as_f64() * g.as_f64()).sum() };
                let d_mask = dot(mask_row);
                let upstream: Vec<f64> = fb.weights.iter().map(|&(id, _)| dot(emb.row(id as usize))).collect();
                let d_lambda = fb.weights.iter().zip(&upstream).map(|(&(_, w), &g)| w * g).sum::<f64>() - d_mask;
                let dl = softmask::lambda_raw_grads(fb.entropy, sm);
                for i in 0..3 {
                    sm_grad[i] += d_lambda * fb.multiplier * dl[i];
                }
                if sm.superposition == Superposition::FullSoftmax {
                    let p = pt.row(b * len + l);
                    let scaled: Vec<f64> = upstream.iter().map(|g| g * fb.lambda).collect();
                    sm_grad[3] +=
                        softmask::temperature_raw_grad(p.as_slice().expect("contiguous rows"), &fb.weights, &scaled, sm);
                }
            }
        }
    }
    Ok((loss, Gradients { backbone: back.grads, sm: sm_grad }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with two parameter groups: the backbone and the soft-mask scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m_bb: Vec<F>,
    pub v_bb: Vec<F>,
    pub m_sm: [f64; 4],
    pub v_sm: [f64; 4],
}

impl<F: Float> Adam<F> {
    pub fn new(n_backbone: usize) -> Self {
        Adam {
            hyper: AdamHyper::default(),
            step: 0,
            m_bb: vec![F::zero(); n_backbone],
            v_bb: vec![F::zero(); n_backbone],
            m_sm: [0.0; 4],
            v_sm: [0.0; 4],
        }
    }

    /// One bias-corrected update with per-group learning rates.
    pub fn update(&mut self, params: &mut [F], sm_raw: &mut [f64; 4], grads: &Gradients<F>, lr_bb: f64, lr_sm: f64) {
        self.step += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (F::f(beta1), F::f(beta2));
        let (one_b1, one_b2) = (F::f(1.0 - beta1), F::f(1.0 - beta2));
        let step_size = F::f(lr_bb / c1);
        let inv_c2 = F::f(1.0 / c2);
        let eps_f = F::f(eps);
        for (((p, &g), m), v) in params.iter_mut().zip(&grads.backbone).zip(&mut self.m_bb).zip(&mut self.v_bb) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *p -= step_size * *m / ((*v * inv_c2).sqrt() + eps_f);
        }
        for i in 0..4 {
            let g = grads.sm[i];
            self.m_sm[i] = beta1 * self.m_sm[i] + (1.0 - beta1) * g;
            self.v_sm[i] = beta2 * self.v_sm[i] + (1.0 - beta2) * g * g;
            sm_raw[i] -= lr_sm * (self.m_sm[i] / c1) / ((self.v_sm[i] / c2).sqrt() + eps);
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Float>(grads: &mut Gradients<F>, max_norm: f64) -> f64 {
    let sq: f64 = grads.backbone.iter().map(|g| g.as_f64().powi(2)).sum::<f64>() + grads.sm.iter().map(|g| g * g).sum::<f64>();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        let sf = F::f(s);
        grads.backbone.iter_mut().for_each(|g| *g *= sf);
        grads.sm.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

fn check_finite<F: Float>(model: &Model<F>, grads: &Gradients<F>) -> Result<()> {
    if let Some(i) = grads.backbone.iter().position(|g| !g.is_finite()) {
        let spec = model.layout.specs.iter().find(|s| s.range().contains(&i)).expect("index in layout");
        return Err(Error::NonFiniteGradient(spec.name.clone()));
    }
    const NAMES: [&str; 4] = ["sm.raw_s", "sm.raw_a", "sm.raw_b", "sm.raw_temp"];
    if let Some(i) = grads.sm.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(NAMES[i].into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub omega_s: f64,
    pub omega_a: f64,
    pub omega_b: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub sm_active: bool,
    pub updated: bool,
}

/// Owns the model, soft-mask parameters, optimizer state and the RNG.
#[derive(Debug, Clone)]
pub struct Trainer<F> {
    pub model: Model<F>,
    pub sm: SmParams,
    pub config: TrainConfig,
    pub opt: Adam<F>,
    pub rng: ChaCha8Rng,
    /// Completed steps, including ones skipped for lack of masked tokens.
    pub step: u64,
}

impl<F: Float> Trainer<F> {
    pub fn new(model: Model<F>, sm: SmParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        sm.validate(model.config.vocab_size)?;
        let opt = Adam::new(model.param_count());
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer { model, sm, config, opt, rng, step: 0 })
    }

    fn lr_scale(&self) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 {
            1.0
        } else {
            ((self.step + 1) as f64 / w as f64).min(1.0)
        }
    }

    /// One training step on an explicit batch.
    pub fn train_step(&mut self, batch: &[Vec<TokenId>]) -> Result<StepOutcome> {
        let mask_id = self.model.config.mask_id();
        let draw = draw_step(batch, &self.config, self.sm.p_sm, mask_id, &mut self.rng)?;
        self.step += 1;
        if draw.masked_count() == 0 {
            return Ok(StepOutcome { loss: 0.0, sm_active: draw.sm_active, updated: false });
        }
        let p_tilde = if draw.sm_active { Some(first_pass(&self.model, &draw)?) } else { None };
        let (loss, mut grads) = objective_and_grads(&self.model, &self.sm, &draw, p_tilde.as_ref())?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, value: loss });
        }
        check_finite(&self.model, &grads)?;
        if let Some(max) = self.config.grad_clip_norm {
            clip_global_norm(&mut grads, max);
        }
        let scale = self.lr_scale();
        let mut raw = self.sm.raw();
        self.opt.update(&mut self.model.params, &mut raw, &grads, self.config.lr_backbone * scale, self.config.lr_sm * scale);
        self.sm.set_raw(raw);
        Ok(StepOutcome { loss, sm_active: draw.sm_active, updated: true })
    }

    /// Draws a batch of windows (with replacement) and trains on it.
    pub fn train_step_sampled(&mut self, windows: &[Vec<TokenId>]) -> Result<StepOutcome> {
        if windows.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let batch: Vec<Vec<TokenId>> =
            (0..self.config.batch_size).map(|_| windows.choose(&mut self.rng).expect("non-empty").clone()).collect();
        self.train_step(&batch)
    }

    /// Trains until `total_steps`, calling `on_row` after every step.
    pub fn run(&mut self, windows: &[Vec<TokenId>], mut on_row: impl FnMut(&Self, MetricsRow) -> Result<()>) -> Result<()> {
        let start = Instant::now();
        while (self.step as usize) < self.config.total_steps {
            let out = self.train_step_sampled(windows)?;
            let eff = self.sm.effective();
            let row = MetricsRow {
                step: self.step,
                loss: out.loss,
                omega_s: eff.omega_s,
                omega_a: eff.omega_a,
                omega_b: eff.omega_b,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            on_row(self, row)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            vocab_size: 7,
            max_len: 8,
            time_conditioned: false,
            mlp_ratio: 2,
            time_buckets: 4,
        }
    }

    #[test]
    fn sample_time_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_time(0.2, 0.8, &mut rng)).collect();
        assert!(xs.iter().all(|&x| (0.2..0.8).contains(&x)));
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = (0.36f64 / 12.0 / n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn adam_first_step() {
        let mut opt = Adam::<f64>::new(1);
        let mut p = vec![1.0];
        let mut raw = [0.0; 4];
        let g = Gradients { backbone: vec![1.0], sm: [1.0, 0.0, 0.0, 0.0] };
        opt.update(&mut p, &mut raw, &g, 0.1, 1e-2);
        assert!((p[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((raw[0] + 1e-2).abs() < 1e-8);
        assert_eq!(raw[1], 0.0);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut opt = Adam::<f64>::new(3);
        let mut p = vec![0.5, -1.0, 2.0];
        let mut raw = [1.0, 2.0, 3.0, 4.0];
        let g = Gradients { backbone: vec![0.0; 3], sm: [0.0; 4] };
        opt.update(&mut p, &mut raw, &g, 0.1, 0.1);
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
        assert_eq!(raw, [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = Gradients { backbone: vec![3.0f64, 0.0], sm: [4.0, 0.0, 0.0, 0.0] };
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.backbone[0] - 0.6).abs() < 1e-12 && (g.sm[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn doubling_t_halves_loss() {
        let model = Model::<f64>::new(tiny(), 1).unwrap();
        let sm = SmParams::init(-1.5, 7).unwrap();
        let draw = StepDraw {
            x0: vec![vec![0, 1, 2, 3]],
            times: vec![0.3],
            xt: vec![vec![6, 1, 6, 3]],
            masked: vec![vec![true, false, true, false]],
            sm_active: false,
        };
        let a = objective(&model, &sm, &draw, None).unwrap();
        let mut d2 = draw.clone();
        d2.times = vec![0.6];
        let b = objective(&model, &sm, &d2, None).unwrap();
        assert_eq!(a, 2.0 * b);
    }

    #[test]
    fn empty_mask_skips_update() {
        let model = Model::<f64>::new(tiny(), 1).unwrap();
        let mut cfg = TrainConfig::new(1e-2, 1, 1, 0);
        cfg.b_l = 0.0;
        cfg.b_h = 1e-12;
        let mut tr = Trainer::new(model, SmParams::init(-1.5, 7).unwrap(), cfg).unwrap();
        let before = tr.model.params.clone();
        let out = tr.train_step(&[vec![0, 1, 2]]).unwrap();
        assert!(!out.updated && out.loss == 0.0);
        assert_eq!(tr.model.params, before);
    }
}
