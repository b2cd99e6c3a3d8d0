//! Transformer backbone producing one conditioning vector per continuous
//! token, under four ways of feeding discrete guidance.

use std::fmt;
use std::str::FromStr;

use mixar_autodiff::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, MixarError, Result};
use crate::mixture::{mix_rows, Embedders};
use crate::nn::{normal_tensor, Block, LayerNorm, Linear, Memory};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GuidanceVariant {
    /// Masked positions carry projected codewords of the guidance tokens.
    #[serde(rename = "dc-mix")]
    DcMix,
    /// Guidance tokens prepended as a second sequence of length N.
    #[serde(rename = "dc-sa")]
    DcSa,
    /// Guidance tokens attended through a cross-attention block per layer.
    #[serde(rename = "dc-ca")]
    DcCa,
    /// Learned mask token, no discrete input.
    #[serde(rename = "mar")]
    MarBaseline,
}

impl GuidanceVariant {
    pub const ALL: [GuidanceVariant; 4] = [Self::DcMix, Self::DcSa, Self::DcCa, Self::MarBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Self::DcMix => "dc-mix",
            Self::DcSa => "dc-sa",
            Self::DcCa => "dc-ca",
            Self::MarBaseline => "mar",
        }
    }

    pub fn uses_guidance(self) -> bool {
        self != Self::MarBaseline
    }
}

impl fmt::Display for GuidanceVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GuidanceVariant {
    type Err = MixarError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "dc-mix" | "dcmix" | "mixar" => Ok(Self::DcMix),
            "dc-sa" | "dcsa" => Ok(Self::DcSa),
            "dc-ca" | "dcca" => Ok(Self::DcCa),
            "mar" | "mar-baseline" | "baseline" => Ok(Self::MarBaseline),
            _ => Err(config(format!(
                "unknown variant {s:?} (expected dc-mix, dc-sa, dc-ca or mar)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub n_tokens: usize,
    pub n_cls: usize,
    pub n_classes: usize,
    pub d_c: usize,
    pub d_d: usize,
    pub vocab: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_tokens: 16,
            n_cls: 4,
            n_classes: 8,
            d_c: 8,
            d_d: 8,
            vocab: 64,
            width: 128,
            layers: 6,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tokens == 0 || self.width == 0 || self.d_c == 0 || self.d_d == 0 || self.vocab == 0 {
            return Err(config("backbone dimensions must be positive"));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(config(format!(
                "width {} must be divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    /// Index of the learned null class used for classifier-free guidance.
    pub fn null_class(&self) -> usize {
        self.n_classes
    }
}

/// Tokens taking part in one forward pass, with and without class tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TokenCounts {
    pub with_cls: usize,
    pub without_cls: usize,
}

pub fn token_counts(variant: GuidanceVariant, n: usize, n_cls: usize) -> TokenCounts {
    let without_cls = match variant {
        GuidanceVariant::DcMix | GuidanceVariant::MarBaseline => n,
        GuidanceVariant::DcSa | GuidanceVariant::DcCa => 2 * n,
    };
    TokenCounts {
        with_cls: without_cls + n_cls,
        without_cls,
    }
}

/// Query-key pairs scored per sequence across all layers.
pub fn attention_pairs(variant: GuidanceVariant, n: usize, n_cls: usize, layers: usize) -> u64 {
    let (n, c, l) = (n as u64, n_cls as u64, layers as u64);
    match variant {
        GuidanceVariant::DcMix | GuidanceVariant::MarBaseline => (n + c).pow(2) * l,
        GuidanceVariant::DcSa => (2 * n + c).pow(2) * l,
        GuidanceVariant::DcCa => ((n + c).pow(2) + (n + c) * n) * l,
    }
}

/// Trainable scalars of the backbone alone, counted from its construction.
pub fn backbone_parameters(variant: GuidanceVariant, cfg: &BackboneConfig) -> usize {
    let d = cfg.width;
    let shared = Linear::num_params(cfg.d_c, d)
        + cfg.n_tokens * d
        + (cfg.n_classes + 1) * d
        + cfg.n_cls * d
        + cfg.layers * Block::num_params(d, d * cfg.mlp_ratio)
        + LayerNorm::num_params(d);
    let extra = match variant {
        GuidanceVariant::MarBaseline => d,
        GuidanceVariant::DcMix => Linear::num_params(cfg.d_d, d),
        GuidanceVariant::DcSa => d + cfg.vocab * d + cfg.n_tokens * d,
        GuidanceVariant::DcCa => {
            d + cfg.vocab * d + cfg.n_tokens * d + cfg.layers * Block::num_cross_params(d)
        }
    };
    shared + extra
}

#[derive(Debug, Clone)]
pub struct Backbone<T: Real> {
    pub cfg: BackboneConfig,
    pub variant: GuidanceVariant,
    cont_proj: Linear,
    pos: ParamId,
    class_emb: ParamId,
    cls_pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    mask_token: Option<ParamId>,
    disc_proj: Option<Linear>,
    disc_table: Option<ParamId>,
    disc_pos: Option<ParamId>,
    /// Frozen codewords used by DC-Mix's discrete embedder.
    codebook: Option<Tensor<T>>,
}

/// Inputs for a batch of `B` sequences of `N` tokens.
#[derive(Debug, Clone, Copy)]
pub struct BackboneInput<'a, T> {
    /// `(B*N) x d_c`; rows at masked positions are ignored.
    pub x_c: &'a Tensor<T>,
    pub mask: &'a [bool],
    /// Discrete guidance for every position (`B*N`); required unless the
    /// variant is the baseline.
    pub guidance: Option<&'a [usize]>,
    /// One class id per sequence; `n_classes` selects the null class.
    pub classes: &'a [usize],
}

#[derive(Debug, Clone, Copy)]
pub struct BackboneOutput {
    /// `(B*N) x d_b`, continuous positions only.
    pub z: Var,
    /// Attention pairs per sequence, measured from the graph.
    pub attention_pairs: u64,
}

impl<T: Real> Backbone<T> {
    /// Registers parameters under `backbone.`. Parameters shared by every
    /// variant are created first from one seeded stream, so runs that differ
    /// only in variant start from identical shared weights.
    pub fn new(
        store: &mut ParamStore<T>,
        cfg: BackboneConfig,
        variant: GuidanceVariant,
        codebook: Option<Tensor<T>>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if variant == GuidanceVariant::DcMix {
            match &codebook {
                Some(cb) if cb.cols() == cfg.d_d && cb.rows() == cfg.vocab => {}
                Some(cb) => {
                    return Err(contract(format!(
                        "codebook {:?} does not match vocab {} x d_d {}",
                        cb.shape(),
                        cfg.vocab,
                        cfg.d_d
                    )))
                }
                None => return Err(contract("dc-mix needs the discrete tokenizer codebook")),
            }
        }
        let d = cfg.width;
        let mut rng = rng::stream(seed, "backbone/init");
        let cont_proj = Linear::new(store, "backbone.cont_proj", cfg.d_c, d, &mut rng);
        let pos = store.add("backbone.pos", normal_tensor(cfg.n_tokens, d, 0.02, &mut rng));
        let class_emb = store.add("backbone.class_emb", normal_tensor(cfg.n_classes + 1, d, 0.02, &mut rng));
        let cls_pos = store.add("backbone.cls_pos", normal_tensor(cfg.n_cls, d, 0.02, &mut rng));
        let mut blocks: Vec<Block> = (0..cfg.layers)
            .map(|l| Block::new(store, &format!("backbone.blocks.{l}"), d, cfg.heads, d * cfg.mlp_ratio, &mut rng))
            .collect();
        let ln_f = LayerNorm::new(store, "backbone.ln_f", d);

        let mut rng = rng::stream(seed, &format!("backbone/init/{variant}"));
        let mut mask_token = None;
        let mut disc_proj = None;
        let mut disc_table = None;
        let mut disc_pos = None;
        match variant {
            GuidanceVariant::DcMix => {
                disc_proj = Some(Linear::new(store, "backbone.disc_proj", cfg.d_d, d, &mut rng));
            }
            _ => {
                mask_token = Some(store.add("backbone.mask_token", normal_tensor(1, d, 0.02, &mut rng)));
            }
        }
        if matches!(variant, GuidanceVariant::DcSa | GuidanceVariant::DcCa) {
            disc_table = Some(store.add("backbone.disc_table", normal_tensor(cfg.vocab, d, 0.02, &mut rng)));
            disc_pos = Some(store.add("backbone.disc_pos", normal_tensor(cfg.n_tokens, d, 0.02, &mut rng)));
        }
        if variant == GuidanceVariant::DcCa {
            for (l, b) in blocks.iter_mut().enumerate() {
                b.add_cross(store, &format!("backbone.blocks.{l}"), d, cfg.heads, &mut rng);
            }
        }
        Ok(Self {
            cfg,
            variant,
            cont_proj,
            pos,
            class_emb,
            cls_pos,
            blocks,
            ln_f,
            mask_token,
            disc_proj,
            disc_table,
            disc_pos,
            codebook: if variant == GuidanceVariant::DcMix { codebook } else { None },
        })
    }

    pub fn codebook(&self) -> Option<&Tensor<T>> {
        self.codebook.as_ref()
    }

    fn check(&self, input: &BackboneInput<'_, T>) -> Result<usize> {
        let n = self.cfg.n_tokens;
        let b = input.classes.len();
        if input.x_c.rows() != b * n || input.x_c.cols() != self.cfg.d_c {
            return Err(contract(format!(
                "continuous input {:?} does not match {b} sequences of {n} x {}",
                input.x_c.shape(),
                self.cfg.d_c
            )));
        }
        if input.mask.len() != b * n {
            return Err(contract("mask length does not match the batch"));
        }
        if let Some(&c) = input.classes.iter().find(|&&c| c > self.cfg.n_classes) {
            return Err(contract(format!("class {c} out of range")));
        }
        match (self.variant.uses_guidance(), input.guidance) {
            (true, None) => {
                return Err(contract(format!("variant {} needs discrete guidance", self.variant)))
            }
            (false, Some(_)) => {
                return Err(contract("the baseline variant takes no discrete guidance"))
            }
            (true, Some(gd)) => {
                if gd.len() != b * n {
                    return Err(contract("guidance length does not match the batch"));
                }
                if let Some(&t) = gd.iter().find(|&&t| t >= self.cfg.vocab) {
                    return Err(contract(format!("guidance index {t} out of range")));
                }
            }
            (false, None) => {}
        }
        Ok(b)
    }

    fn tiled_positions(&self, b: usize) -> Vec<usize> {
        (0..b).flat_map(|_| 0..self.cfg.n_tokens).collect()
    }

    /// Embeddings of the `B*N` grid positions after the masked positions have
    /// been replaced (discrete guidance for DC-Mix, mask token otherwise),
    /// positional terms included.
    pub fn embed_tokens(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: &BackboneInput<'_, T>) -> Result<Var> {
        let b = self.check(input)?;
        let rows = b * self.cfg.n_tokens;
        let x = g.constant(input.x_c.clone());
        let e_c = self.cont_proj.forward(g, store, x);
        let e_m = match self.variant {
            GuidanceVariant::DcMix => {
                let cb = self.codebook.as_ref().expect("checked at construction");
                let words = g.constant(cb.select_rows(input.guidance.expect("checked")));
                self.disc_proj.as_ref().expect("dc-mix projection").forward(g, store, words)
            }
            _ => {
                let m = g.param(store, self.mask_token.expect("mask token"));
                g.gather_rows(m, &vec![0; rows])
            }
        };
        let both = g.concat_rows(&[e_c, e_m]);
        let mixed = g.gather_rows(both, &mix_rows(input.mask));
        let pos = g.param(store, self.pos);
        let p = g.gather_rows(pos, &self.tiled_positions(b));
        Ok(g.add(mixed, p))
    }

    fn embed_discrete_prefix(&self, g: &mut Graph<T>, store: &ParamStore<T>, guidance: &[usize], b: usize) -> Var {
        let table = g.param(store, self.disc_table.expect("discrete table"));
        let e = g.gather_rows(table, guidance);
        let pos = g.param(store, self.disc_pos.expect("discrete positions"));
        let p = g.gather_rows(pos, &self.tiled_positions(b));
        g.add(e, p)
    }

    pub fn forward(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: &BackboneInput<'_, T>) -> Result<BackboneOutput> {
        let b = self.check(input)?;
        let (n, nc) = (self.cfg.n_tokens, self.cfg.n_cls);
        let tokens = self.embed_tokens(g, store, input)?;

        let cls_table = g.param(store, self.class_emb);
        let cls_idx: Vec<usize> = input.classes.iter().flat_map(|&c| std::iter::repeat_n(c, nc)).collect();
        let cls = g.gather_rows(cls_table, &cls_idx);
        let cls_pos = g.param(store, self.cls_pos);
        let cp = g.gather_rows(cls_pos, &(0..b).flat_map(|_| 0..nc).collect::<Vec<_>>());
        let cls = g.add(cls, cp);

        let prefix = match self.variant {
            GuidanceVariant::DcSa | GuidanceVariant::DcCa => {
                Some(self.embed_discrete_prefix(g, store, input.guidance.expect("checked"), b))
            }
            _ => None,
        };
        let in_seq_prefix = if self.variant == GuidanceVariant::DcSa { n } else { 0 };
        let seq = nc + in_seq_prefix + n;

        // stacked parts: [cls (B*nc); tokens (B*N); prefix (B*N)], gathered
        // into per-sequence order [cls; prefix?; tokens]
        let mut parts = vec![cls, tokens];
        if let (Some(p), GuidanceVariant::DcSa) = (prefix, self.variant) {
            parts.push(p);
        }
        let stacked = g.concat_rows(&parts);
        let tok_base = b * nc;
        let pre_base = tok_base + b * n;
        let mut order = Vec::with_capacity(b * seq);
        for bi in 0..b {
            order.extend((0..nc).map(|j| bi * nc + j));
            if in_seq_prefix > 0 {
                order.extend((0..n).map(|i| pre_base + bi * n + i));
            }
            order.extend((0..n).map(|i| tok_base + bi * n + i));
        }
        let mut x = g.gather_rows(stacked, &order);

        let memory = match self.variant {
            GuidanceVariant::DcCa => Some(Memory {
                rows: prefix.expect("dc-ca memory"),
                len: n,
            }),
            _ => None,
        };
        let pairs_before = g.attention_pairs();
        for blk in &self.blocks {
            x = blk.forward(g, store, x, b, seq, memory);
        }
        let pairs = g.attention_pairs() - pairs_before;

        let cont_rows: Vec<usize> = (0..b)
            .flat_map(|bi| (0..n).map(move |i| bi * seq + nc + in_seq_prefix + i))
            .collect();
        let z = g.gather_rows(x, &cont_rows);
        let z = self.ln_f.forward(g, store, z);
        Ok(BackboneOutput {
            z,
            attention_pairs: pairs / b.max(1) as u64,
        })
    }
}

/// The backbone's two token embedders evaluated outside a graph, for use with
/// [`crate::mixture::dc_mix`]. Both include the positional row, matching
/// [`Backbone::embed_tokens`].
pub struct BackboneEmbedders<'a, T: Real> {
    pub backbone: &'a Backbone<T>,
    pub store: &'a ParamStore<T>,
}

impl<T: Real> BackboneEmbedders<'_, T> {
    fn eval_linear(&self, l: &Linear, x: &[T], position: usize) -> Vec<T> {
        let w = self.store.get(l.w);
        let b = self.store.get(l.b.expect("bias"));
        let pos = self.store.get(self.backbone.pos).row(position);
        (0..l.d_out)
            .map(|o| {
                let mut acc = b.data()[o];
                for (i, &xi) in x.iter().enumerate() {
                    acc += xi * w.get(i, o);
                }
                acc + pos[o]
            })
            .collect()
    }
}

impl<T: Real> Embedders<T> for BackboneEmbedders<'_, T> {
    fn width(&self) -> usize {
        self.backbone.cfg.width
    }

    fn embed_continuous(&self, position: usize, token: &[T]) -> Vec<T> {
        self.eval_linear(&self.backbone.cont_proj, token, position)
    }

    fn embed_discrete(&self, position: usize, index: usize) -> Result<Vec<T>> {
        let bb = self.backbone;
        let (Some(proj), Some(cb)) = (&bb.disc_proj, &bb.codebook) else {
            return Err(contract(format!("variant {} has no codeword embedder", bb.variant)));
        };
        if index >= cb.rows() {
            return Err(contract(format!("codebook index {index} out of range")));
        }
        Ok(self.eval_linear(proj, cb.row(index), position))
    }
}
