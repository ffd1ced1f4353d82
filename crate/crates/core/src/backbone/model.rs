//! Pre-norm transformer encoder with hand-written backward pass.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::params::ParamLayout;
use super::{BackboneConfig, SoftToken};
use crate::error::{Error, Result};
use crate::float::Float;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Model<F> {
    pub config: BackboneConfig,
    pub layout: ParamLayout,
    pub params: Vec<F>,
}

struct LayerCache<F> {
    xhat1: Array2<F>,
    rstd1: Array1<F>,
    a1: Array2<F>,
    qkv: Array2<F>,
    attn: Vec<Array2<F>>,
    oc: Array2<F>,
    xhat2: Array2<F>,
    rstd2: Array1<F>,
    a2: Array2<F>,
    f1: Array2<F>,
    g: Array2<F>,
}

struct Cache<F> {
    layers: Vec<LayerCache<F>>,
    xhat_f: Array2<F>,
    rstd_f: Array1<F>,
    af: Array2<F>,
}

/// Output of a forward pass over a batch of equal-length sequences.
/// `probs` row `b * len + l` is position `l` of sequence `b`.
pub struct Forward<F> {
    pub probs: Array2<F>,
    pub batch: usize,
    pub len: usize,
    buckets: Vec<usize>,
    cache: Option<Cache<F>>,
}

impl<F: Float> Forward<F> {
    pub fn seq_probs(&self, b: usize) -> ArrayView2<'_, F> {
        self.probs.slice(s![b * self.len..(b + 1) * self.len, ..])
    }

    pub fn row(&self, b: usize, l: usize) -> ArrayView1<'_, F> {
        self.probs.row(b * self.len + l)
    }
}

pub struct Backward<F> {
    /// Gradient for every backbone parameter, laid out like `Model::params`.
    pub grads: Vec<F>,
    /// Gradient with respect to each position's input embedding (before the
    /// positional and time terms are added; they are additive so it is the same).
    pub d_input: Array2<F>,
}

impl<F: Float> Model<F> {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![F::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid_scale = 1.0 / (2.0 * config.layers as f64).sqrt();
        for spec in &layout.specs {
            let n = &spec.name;
            let (fill, scale) = if n.ends_with(".gain") {
                (Some(1.0), 0.0)
            } else if n.ends_with("bias") || n.contains(".b_") {
                (Some(0.0), 0.0)
            } else if n.ends_with("w_out") || n.ends_with("w_fc2") {
                (None, resid_scale)
            } else {
                (None, 1.0)
            };
            for v in &mut params[spec.range()] {
                *v = F::f(fill.unwrap_or_else(|| scale * normal.sample(&mut rng)));
            }
        }
        Ok(Model { config, layout, params })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn cast<G: Float>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|&v| G::f(v.as_f64())).collect(),
        }
    }

    pub fn param(&self, name: &str) -> Option<&[F]> {
        self.layout.index_of(name).map(|i| &self.params[self.layout.specs[i].range()])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [F]> {
        let i = self.layout.index_of(name)?;
        let r = self.layout.specs[i].range();
        Some(&mut self.params[r])
    }

    pub fn token_embeddings(&self) -> ArrayView2<'_, F> {
        self.layout.view2(&self.params, self.layout.tok_emb)
    }

    /// Forward pass that keeps activations for [`Model::backward`].
    pub fn forward(&self, inputs: &[Vec<SoftToken<F>>], times: Option<&[f64]>) -> Result<Forward<F>> {
        self.run(inputs, times, true)
    }

    /// Forward pass without activation cache.
    pub fn predict(&self, inputs: &[Vec<SoftToken<F>>], times: Option<&[f64]>) -> Result<Forward<F>> {
        self.run(inputs, times, false)
    }

    fn check_inputs(&self, inputs: &[Vec<SoftToken<F>>], times: Option<&[f64]>) -> Result<usize> {
        let cfg = &self.config;
        if cfg.time_conditioned != times.is_some() {
            return Err(Error::TimeArgument { conditioned: cfg.time_conditioned, supplied: times.is_some() });
        }
        let len = inputs.first().map_or(0, Vec::len);
        if len == 0 {
            return Err(Error::InvalidSoftInput("empty batch or sequence".into()));
        }
        if len > cfg.max_len {
            return Err(Error::LengthOverflow { len, max_len: cfg.max_len });
        }
        if inputs.iter().any(|s| s.len() != len) {
            return Err(Error::InvalidSoftInput("sequences in a batch must share one length".into()));
        }
        if let Some(ts) = times {
            if ts.len() != inputs.len() {
                return Err(Error::InvalidSoftInput("one time value per sequence required".into()));
            }
            if let Some(&t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
                return Err(Error::TimeOutOfRange(t));
            }
        }
        let mask_id = cfg.mask_id();
        for tok in inputs.iter().flatten() {
            tok.validate(mask_id, cfg.vocab_size)?;
        }
        Ok(len)
    }

    fn embed(&self, inputs: &[Vec<SoftToken<F>>], len: usize, buckets: &[usize]) -> Array2<F> {
        let lay = &self.layout;
        let d = self.config.model_dim;
        let emb = lay.view2(&self.params, lay.tok_emb);
        let pos = lay.view2(&self.params, lay.pos_emb);
        let time = lay.time_emb.map(|i| lay.view2(&self.params, i));
        let mask_row = emb.row(self.config.vocab_size - 1);
        let mut x = Array2::<F>::zeros((inputs.len() * len, d));
        for (b, seq) in inputs.iter().enumerate() {
            for (l, tok) in seq.iter().enumerate() {
                let mut row = x.row_mut(b * len + l);
                row += &pos.row(l);
                if let Some(te) = &time {
                    row += &te.row(buckets[b]);
                }
                if tok.mask_weight != F::zero() {
                    row.scaled_add(tok.mask_weight, &mask_row);
                }
                for &(id, w) in &tok.entries {
                    row.scaled_add(w, &emb.row(id as usize));
                }
            }
        }
        x
    }

    fn run(&self, inputs: &[Vec<SoftToken<F>>], times: Option<&[f64]>, keep: bool) -> Result<Forward<F>> {
        let len = self.check_inputs(inputs, times)?;
        let cfg = &self.config;
        let lay = &self.layout;
        let p = &self.params;
        let batch = inputs.len();
        let buckets: Vec<usize> = times.map_or_else(Vec::new, |ts| ts.iter().map(|&t| cfg.time_bucket(t)).collect());
        let mut x = self.embed(inputs, len, &buckets);
        let mut layers = Vec::with_capacity(if keep { cfg.layers } else { 0 });

        for bi in &lay.blocks {
            let (a1, xhat1, rstd1) = layer_norm(&x, lay.view1(p, bi.ln1_gain), lay.view1(p, bi.ln1_bias));
            let qkv = linear(&a1, lay.view2(p, bi.w_qkv), lay.view1(p, bi.b_qkv));
            let (oc, attn) = attention(&qkv, batch, len, cfg.heads, cfg.head_dim());
            let h = x + linear(&oc, lay.view2(p, bi.w_out), lay.view1(p, bi.b_out));
            let (a2, xhat2, rstd2) = layer_norm(&h, lay.view1(p, bi.ln2_gain), lay.view1(p, bi.ln2_bias));
            let f1 = linear(&a2, lay.view2(p, bi.w_fc1), lay.view1(p, bi.b_fc1));
            let g = f1.mapv(gelu);
            x = h + linear(&g, lay.view2(p, bi.w_fc2), lay.view1(p, bi.b_fc2));
            if keep {
                layers.push(LayerCache { xhat1, rstd1, a1, qkv, attn, oc, xhat2, rstd2, a2, f1, g });
            }
        }

        let (af, xhat_f, rstd_f) = layer_norm(&x, lay.view1(p, lay.lnf_gain), lay.view1(p, lay.lnf_bias));
        let mut probs = linear(&af, lay.view2(p, lay.w_head), lay.view1(p, lay.b_head));
        softmax_rows(&mut probs);
        let cache = keep.then_some(Cache { layers, xhat_f, rstd_f, af });
        Ok(Forward { probs, batch, len, buckets, cache })
    }

    /// Backpropagates `dlogits` (gradient of the objective with respect to the
    /// pre-softmax outputs) through a cached forward pass.
    pub fn backward(&self, fwd: &Forward<F>, inputs: &[Vec<SoftToken<F>>], dlogits: &Array2<F>) -> Backward<F> {
        let cache = fwd.cache.as_ref().expect("backward needs a forward pass made with Model::forward");
        let lay = &self.layout;
        let p = &self.params;
        let cfg = &self.config;
        let mut grads = vec![F::zero(); lay.total];

        accumulate2(lay, &mut grads, lay.w_head, &cache.af.t().dot(dlogits));
        accumulate1(lay, &mut grads, lay.b_head, &dlogits.sum_axis(Axis(0)));
        let d_af = dlogits.dot(&lay.view2(p, lay.w_head).t());
        let mut dx = layer_norm_backward(
            &d_af,
            &cache.xhat_f,
            &cache.rstd_f,
            lay.view1(p, lay.lnf_gain),
            (lay.lnf_gain, lay.lnf_bias),
            lay,
            &mut grads,
        );

        for (bi, lc) in lay.blocks.iter().zip(&cache.layers).rev() {
            // x_out = h + fc2(gelu(fc1(ln2(h))))
            accumulate2(lay, &mut grads, bi.w_fc2, &lc.g.t().dot(&dx));
            accumulate1(lay, &mut grads, bi.b_fc2, &dx.sum_axis(Axis(0)));
            let mut df1 = dx.dot(&lay.view2(p, bi.w_fc2).t());
            Zip::from(&mut df1).and(&lc.f1).for_each(|d, &f| *d = *d * gelu_grad(f));
            accumulate2(lay, &mut grads, bi.w_fc1, &lc.a2.t().dot(&df1));
            accumulate1(lay, &mut grads, bi.b_fc1, &df1.sum_axis(Axis(0)));
            let da2 = df1.dot(&lay.view2(p, bi.w_fc1).t());
            let dh = dx
                + layer_norm_backward(
                    &da2,
                    &lc.xhat2,
                    &lc.rstd2,
                    lay.view1(p, bi.ln2_gain),
                    (bi.ln2_gain, bi.ln2_bias),
                    lay,
                    &mut grads,
                );

            // h = x + out(attn(qkv(ln1(x))))
            accumulate2(lay, &mut grads, bi.w_out, &lc.oc.t().dot(&dh));
            accumulate1(lay, &mut grads, bi.b_out, &dh.sum_axis(Axis(0)));
            let doc = dh.dot(&lay.view2(p, bi.w_out).t());
            let dqkv = attention_backward(&doc, &lc.qkv, &lc.attn, fwd.batch, fwd.len, cfg.heads, cfg.head_dim());
            accumulate2(lay, &mut grads, bi.w_qkv, &lc.a1.t().dot(&dqkv));
            accumulate1(lay, &mut grads, bi.b_qkv, &dqkv.sum_axis(Axis(0)));
            let da1 = dqkv.dot(&lay.view2(p, bi.w_qkv).t());
            dx = dh
                + layer_norm_backward(
                    &da1,
                    &lc.xhat1,
                    &lc.rstd1,
                    lay.view1(p, bi.ln1_gain),
                    (bi.ln1_gain, bi.ln1_bias),
                    lay,
                    &mut grads,
                );
        }

        // Embedding tables.
        let mask_id = cfg.vocab_size - 1;
        let len = fwd.len;
        {
            let mut pos = lay.view2_mut(&mut grads, lay.pos_emb);
            for (r, row) in dx.rows().into_iter().enumerate() {
                let mut g = pos.row_mut(r % len);
                g += &row;
            }
        }
        if let Some(ti) = lay.time_emb {
            let mut te = lay.view2_mut(&mut grads, ti);
            for (r, row) in dx.rows().into_iter().enumerate() {
                let mut g = te.row_mut(fwd.buckets[r / len]);
                g += &row;
            }
        }
        {
            let mut emb = lay.view2_mut(&mut grads, lay.tok_emb);
            for (b, seq) in inputs.iter().enumerate() {
                for (l, tok) in seq.iter().enumerate() {
                    let row = dx.row(b * len + l);
                    if tok.mask_weight != F::zero() {
                        emb.row_mut(mask_id).scaled_add(tok.mask_weight, &row);
                    }
                    for &(id, w) in &tok.entries {
                        emb.row_mut(id as usize).scaled_add(w, &row);
                    }
                }
            }
        }

        Backward { grads, d_input: dx }
    }
}

fn accumulate2<F: Float>(lay: &ParamLayout, grads: &mut [F], idx: usize, g: &Array2<F>) {
    let mut v = lay.view2_mut(grads, idx);
    v += g;
}

fn accumulate1<F: Float>(lay: &ParamLayout, grads: &mut [F], idx: usize, g: &Array1<F>) {
    let mut v = lay.view1_mut(grads, idx);
    v += g;
}

fn linear<F: Float>(x: &Array2<F>, w: ArrayView2<F>, b: ArrayView1<F>) -> Array2<F> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

fn layer_norm<F: Float>(x: &Array2<F>, gain: ArrayView1<F>, bias: ArrayView1<F>) -> (Array2<F>, Array2<F>, Array1<F>) {
    let d = F::f(x.ncols() as f64);
    let eps = F::f(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::<F>::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(F::zero(), |acc, &v| acc + v * v) / d;
        *r = F::one() / (var + eps).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let mut y = &xhat * &gain;
    y += &bias;
    (y, xhat, rstd)
}

fn layer_norm_backward<F: Float>(
    dy: &Array2<F>,
    xhat: &Array2<F>,
    rstd: &Array1<F>,
    gain: ArrayView1<F>,
    (gain_idx, bias_idx): (usize, usize),
    lay: &ParamLayout,
    grads: &mut [F],
) -> Array2<F> {
    accumulate1(lay, grads, gain_idx, &(dy * xhat).sum_axis(Axis(0)));
    accumulate1(lay, grads, bias_idx, &dy.sum_axis(Axis(0)));
    let d = F::f(xhat.ncols() as f64);
    let mut dx = dy * &gain;
    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(rstd.iter()) {
        let sum = row.sum();
        let dot = row.iter().zip(xh.iter()).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
        Zip::from(&mut row).and(&xh).for_each(|g, &xv| {
            *g = r * (*g - sum / d - xv * dot / d);
        });
    }
    dx
}

pub(crate) fn softmax_rows<F: Float>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<F: Float>(x: F) -> F {
    let c = F::f(GELU_C);
    let k = F::f(0.044715);
    let half = F::f(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<F: Float>(x: F) -> F {
    let c = F::f(GELU_C);
    let k = F::f(0.044715);
    let half = F::f(0.5);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + F::f(3.0) * k * x * x)
}

fn attention<F: Float>(qkv: &Array2<F>, batch: usize, len: usize, heads: usize, dh: usize) -> (Array2<F>, Vec<Array2<F>>) {
    let d = heads * dh;
    let scale = F::f(1.0 / (dh as f64).sqrt());
    let parts: Vec<(Array2<F>, Array2<F>)> = (0..batch * heads)
        .into_par_iter()
        .map(|idx| {
            let (b, h) = (idx / heads, idx % heads);
            let rows = b * len..(b + 1) * len;
            let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![rows, 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut a = q.dot(&k.t()) * scale;
            softmax_rows(&mut a);
            let o = a.dot(&v);
            (a, o)
        })
        .collect();
    let mut oc = Array2::<F>::zeros((batch * len, d));
    let mut attn = Vec::with_capacity(parts.len());
    for (idx, (a, o)) in parts.into_iter().enumerate() {
        let (b, h) = (idx / heads, idx % heads);
        oc.slice_mut(s![b * len..(b + 1) * len, h * dh..(h + 1) * dh]).assign(&o);
        attn.push(a);
    }
    (oc, attn)
}

fn attention_backward<F: Float>(
    doc: &Array2<F>,
    qkv: &Array2<F>,
    attn: &[Array2<F>],
    batch: usize,
    len: usize,
    heads: usize,
    dh: usize,
) -> Array2<F> {
    let d = heads * dh;
    let scale = F::f(1.0 / (dh as f64).sqrt());
    let parts: Vec<(Array2<F>, Array2<F>, Array2<F>)> = (0..batch * heads)
        .into_par_iter()
        .map(|idx| {
            let (b, h) = (idx / heads, idx % heads);
            let rows = b * len..(b + 1) * len;
            let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let d_o = doc.slice(s![rows, h * dh..(h + 1) * dh]);
            let a = &attn[idx];
            let mut ds = d_o.dot(&v.t());
            let dv = a.t().dot(&d_o);
            for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                let dot = row.iter().zip(arow.iter()).fold(F::zero(), |acc, (&x, &y)| acc + x * y);
                Zip::from(&mut row).and(&arow).for_each(|g, &av| *g = av * (*g - dot) * scale);
            }
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            (dq, dk, dv)
        })
        .collect();
    let mut dqkv = Array2::<F>::zeros((batch * len, 3 * d));
    for (idx, (dq, dk, dv)) in parts.into_iter().enumerate() {
        let (b, h) = (idx / heads, idx % heads);
        let rows = b * len..(b + 1) * len;
        dqkv.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]).assign(&dq);
        dqkv.slice_mut(s![rows.clone(), d + h * dh..d + (h + 1) * dh]).assign(&dk);
        dqkv.slice_mut(s![rows, 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
    }
    dqkv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::analytic_param_count;

    fn tiny(tc: bool) -> BackboneConfig {
        BackboneConfig {
            layers: 2,
            heads: 2,
            model_dim: 16,
            vocab_size: 11,
            max_len: 12,
            time_conditioned: tc,
            mlp_ratio: 2,
            time_buckets: 8,
        }
    }

    fn random_inputs(n: usize, len: usize, v: u32, seed: u64) -> Vec<Vec<SoftToken<f64>>> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                (0..len)
                    .map(|_| match rng.random_range(0..3) {
                        0 => SoftToken::mask(),
                        1 => SoftToken::hard(rng.random_range(0..v - 1)),
                        _ => SoftToken { mask_weight: 0.6, entries: vec![(0, 0.3), (rng.random_range(1..v - 1), 0.1)] },
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn layout_count_matches_closed_form() {
        for tc in [false, true] {
            let m = Model::<f64>::new(tiny(tc), 0).unwrap();
            assert_eq!(m.param_count(), analytic_param_count(&m.config));
        }
        let desk = BackboneConfig::desk(16, true);
        assert_eq!(ParamLayout::new(&desk).total, analytic_param_count(&desk));
    }

    #[test]
    fn rows_are_distributions() {
        let m = Model::<f64>::new(tiny(false), 3).unwrap();
        let inputs = random_inputs(3, 9, 11, 1);
        let out = m.predict(&inputs, None).unwrap();
        for row in out.probs.rows() {
            assert!(crate::backbone::check_distribution(row));
        }
    }

    #[test]
    fn deterministic_forward() {
        let m = Model::<f32>::new(tiny(true), 3).unwrap();
        let inputs: Vec<Vec<SoftToken<f32>>> = vec![vec![SoftToken::mask(), SoftToken::hard(2), SoftToken::mask()]];
        let a = m.predict(&inputs, Some(&[0.4])).unwrap();
        let b = m.predict(&inputs, Some(&[0.4])).unwrap();
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn zeroed_network_is_uniform() {
        let mut m = Model::<f64>::new(tiny(false), 5).unwrap();
        let names: Vec<String> = m
            .layout
            .specs
            .iter()
            .filter(|s| s.name.contains("attn.") || s.name.contains("mlp.") || s.name.starts_with("head."))
            .map(|s| s.name.clone())
            .collect();
        for n in names {
            m.param_mut(&n).unwrap().iter_mut().for_each(|v| *v = 0.0);
        }
        let out = m.predict(&random_inputs(2, 7, 11, 9), None).unwrap();
        for &p in out.probs.iter() {
            assert!((p - 1.0 / 11.0).abs() < 1e-15);
        }
    }

    #[test]
    fn time_argument_contract() {
        let plain = Model::<f64>::new(tiny(false), 1).unwrap();
        let timed = Model::<f64>::new(tiny(true), 1).unwrap();
        let x = vec![vec![SoftToken::mask(); 4]];
        assert!(matches!(plain.predict(&x, Some(&[0.5])), Err(Error::TimeArgument { .. })));
        assert!(matches!(timed.predict(&x, None), Err(Error::TimeArgument { .. })));
        let a = timed.predict(&x, Some(&[0.25])).unwrap();
        let b = timed.predict(&x, Some(&[0.75])).unwrap();
        assert_ne!(a.probs, b.probs);
    }

    #[test]
    fn length_overflow() {
        let m = Model::<f64>::new(tiny(false), 1).unwrap();
        let x = vec![vec![SoftToken::mask(); 13]];
        assert!(matches!(m.predict(&x, None), Err(Error::LengthOverflow { len: 13, max_len: 12 })));
    }

    #[test]
    fn bidirectional_attention() {
        // Changing the last token must influence the first position's output.
        let m = Model::<f64>::new(tiny(false), 2).unwrap();
        let mut x = vec![vec![SoftToken::mask(), SoftToken::hard(1), SoftToken::hard(2)]];
        let a = m.predict(&x, None).unwrap();
        x[0][2] = SoftToken::hard(5);
        let b = m.predict(&x, None).unwrap();
        assert_ne!(a.row(0, 0), b.row(0, 0));
    }
}
