//! Flat parameter storage with a named, shaped layout.
//!
//! Every trainable backbone tensor lives in one contiguous buffer. The optimizer,
//! the checkpoint writer and the finite-difference checker all walk the same
//! layout, so adding a tensor is a one-line change in [`ParamLayout::new`].

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2};

use super::BackboneConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Indices into [`ParamLayout::specs`] for one transformer block.
#[derive(Debug, Clone, Copy)]
pub struct BlockIdx {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_out: usize,
    pub b_out: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w_fc1: usize,
    pub b_fc1: usize,
    pub w_fc2: usize,
    pub b_fc2: usize,
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub specs: Vec<ParamSpec>,
    pub total: usize,
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub time_emb: Option<usize>,
    pub blocks: Vec<BlockIdx>,
    pub lnf_gain: usize,
    pub lnf_bias: usize,
    pub w_head: usize,
    pub b_head: usize,
}

struct Builder {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize]) -> usize {
        let spec = ParamSpec { name, shape: shape.to_vec(), offset: self.total };
        self.total += spec.len();
        self.specs.push(spec);
        self.specs.len() - 1
    }
}

impl ParamLayout {
    pub fn new(cfg: &BackboneConfig) -> Self {
        let (d, v, f) = (cfg.model_dim, cfg.vocab_size, cfg.ff_dim());
        let mut b = Builder { specs: Vec::new(), total: 0 };
        let tok_emb = b.add("tok_emb".into(), &[v, d]);
        let pos_emb = b.add("pos_emb".into(), &[cfg.max_len, d]);
        let time_emb = cfg.time_conditioned.then(|| b.add("time_emb".into(), &[cfg.time_buckets, d]));
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = |s: &str| format!("blocks.{i}.{s}");
                BlockIdx {
                    ln1_gain: b.add(p("ln1.gain"), &[d]),
                    ln1_bias: b.add(p("ln1.bias"), &[d]),
                    w_qkv: b.add(p("attn.w_qkv"), &[d, 3 * d]),
                    b_qkv: b.add(p("attn.b_qkv"), &[3 * d]),
                    w_out: b.add(p("attn.w_out"), &[d, d]),
                    b_out: b.add(p("attn.b_out"), &[d]),
                    ln2_gain: b.add(p("ln2.gain"), &[d]),
                    ln2_bias: b.add(p("ln2.bias"), &[d]),
                    w_fc1: b.add(p("mlp.w_fc1"), &[d, f]),
                    b_fc1: b.add(p("mlp.b_fc1"), &[f]),
                    w_fc2: b.add(p("mlp.w_fc2"), &[f, d]),
                    b_fc2: b.add(p("mlp.b_fc2"), &[d]),
                }
            })
            .collect();
        let lnf_gain = b.add("ln_f.gain".into(), &[d]);
        let lnf_bias = b.add("ln_f.bias".into(), &[d]);
        let w_head = b.add("head.weight".into(), &[d, v]);
        let b_head = b.add("head.bias".into(), &[v]);
        ParamLayout {
            specs: b.specs,
            total: b.total,
            tok_emb,
            pos_emb,
            time_emb,
            blocks,
            lnf_gain,
            lnf_bias,
            w_head,
            b_head,
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn view1<'a, F>(&self, data: &'a [F], idx: usize) -> ArrayView1<'a, F> {
        let s = &self.specs[idx];
        ArrayView1::from(&data[s.range()])
    }

    pub fn view2<'a, F>(&self, data: &'a [F], idx: usize) -> ArrayView2<'a, F> {
        let s = &self.specs[idx];
        ArrayView2::from_shape((s.shape[0], s.shape[1]), &data[s.range()])
            .expect("layout shape matches buffer")
            .into_dimensionality::<Ix2>()
            .expect("2-d")
    }

    pub fn view1_mut<'a, F>(&self, data: &'a mut [F], idx: usize) -> ArrayViewMut1<'a, F> {
        let s = &self.specs[idx];
        ArrayViewMut1::from(&mut data[s.range()]).into_dimensionality::<Ix1>().expect("1-d")
    }

    pub fn view2_mut<'a, F>(&self, data: &'a mut [F], idx: usize) -> ArrayViewMut2<'a, F> {
        let s = &self.specs[idx];
        ArrayViewMut2::from_shape((s.shape[0], s.shape[1]), &mut data[s.range()]).expect("layout shape matches buffer")
    }
}

/// Closed-form parameter count for a config; must agree with the layout.
///
/// `V*d + max_len*d + [time] buckets*d + layers*(4d^2 + 2*d*f + 9d + f) + 2d + d*V + V`
pub fn analytic_param_count(cfg: &BackboneConfig) -> usize {
    let (d, v, f) = (cfg.model_dim, cfg.vocab_size, cfg.ff_dim());
    let time = if cfg.time_conditioned { cfg.time_buckets * d } else { 0 };
    v * d + cfg.max_len * d + time + cfg.layers * (4 * d * d + 2 * d * f + 9 * d + f) + 2 * d + d * v + v
}
