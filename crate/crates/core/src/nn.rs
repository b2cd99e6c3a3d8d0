//! Layers shared by the discrete generator, the backbone and the tokenizers.
//! Each layer registers its parameters in a caller-owned [`ParamStore`] and
//! keeps only the ids.

use mixar_autodiff::{AttnShape, Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::rng::{self, Rng};

pub(crate) const LN_EPS: f64 = 1e-6;

pub fn normal_tensor<T: Real>(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(rows, cols, |_, _| T::lit(std * rng::normal(rng)))
}

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let std = (2.0 / (d_in + d_out) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), normal_tensor(d_in, d_out, std, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(1, d_out));
        Self {
            w,
            b: Some(b),
            d_in,
            d_out,
        }
    }

    pub fn num_params(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(1, d, T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, d)),
        }
    }

    pub fn num_params(d: usize) -> usize {
        2 * d
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(d.is_multiple_of(heads), "width {d} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    pub fn num_params(d: usize) -> usize {
        4 * Linear::num_params(d, d)
    }

    /// `queries` holds `batch * q_len` rows, `keys` holds `batch * kv_len`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        keys: Var,
        batch: usize,
        q_len: usize,
        kv_len: usize,
    ) -> Var {
        let q = self.q.forward(g, store, queries);
        let k = self.k.forward(g, store, keys);
        let v = self.v.forward(g, store, keys);
        let a = g.attention(
            q,
            k,
            v,
            AttnShape {
                batch,
                q_len,
                kv_len,
                heads: self.heads,
            },
        );
        self.o.forward(g, store, a)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, rng),
        }
    }

    pub fn num_params(d: usize, hidden: usize) -> usize {
        Linear::num_params(d, hidden) + Linear::num_params(hidden, d)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Cross-attention sub-block: queries from the running sequence, keys and
/// values from a fixed memory.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    pub ln: LayerNorm,
    pub attn: Attention,
}

/// Pre-norm bidirectional transformer block, optionally followed by a
/// cross-attention sub-block.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub cross: Option<CrossBlock>,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

/// Memory attended by a block's cross-attention: `batch * len` rows.
#[derive(Debug, Clone, Copy)]
pub struct Memory {
    pub rows: Var,
    pub len: usize,
}

impl Block {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        mlp_hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: Attention::new(store, &format!("{name}.attn"), d, heads, rng),
            cross: None,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, mlp_hidden, rng),
        }
    }

    pub fn add_cross<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut Rng,
    ) {
        self.cross = Some(CrossBlock {
            ln: LayerNorm::new(store, &format!("{name}.cross_ln"), d),
            attn: Attention::new(store, &format!("{name}.cross_attn"), d, heads, rng),
        });
    }

    pub fn num_params(d: usize, mlp_hidden: usize) -> usize {
        2 * LayerNorm::num_params(d) + Attention::num_params(d) + Mlp::num_params(d, mlp_hidden)
    }

    pub fn num_cross_params(d: usize) -> usize {
        LayerNorm::num_params(d) + Attention::num_params(d)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        batch: usize,
        seq: usize,
        memory: Option<Memory>,
    ) -> Var {
        let h = self.ln1.forward(g, store, x);
        let a = self.attn.forward(g, store, h, h, batch, seq, seq);
        let mut x = g.add(x, a);
        if let (Some(cross), Some(mem)) = (&self.cross, memory) {
            let h = cross.ln.forward(g, store, x);
            let a = cross.attn.forward(g, store, h, mem.rows, batch, seq, mem.len);
            x = g.add(x, a);
        }
        let h = self.ln2.forward(g, store, x);
        let m = self.mlp.forward(g, store, h);
        g.add(x, m)
    }
}

/// Row-major softmax of a logits row with a temperature; `temperature <= 0`
/// returns a one-hot at the (lowest-index) argmax.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature <= 1e-8 {
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        let mut p = vec![0.0; logits.len()];
        p[best] = 1.0;
        return p;
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&l| ((l - m) / temperature).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// Draws an index from `probs` by inverse CDF with one uniform draw.
pub fn sample_index(probs: &[f64], rng: &mut Rng) -> usize {
    use rand::Rng as _;
    if let Some(i) = probs.iter().position(|&p| p == 1.0) {
        return i;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}
