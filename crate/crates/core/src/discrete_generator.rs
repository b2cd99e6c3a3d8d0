//! Class-conditional masked discrete token model: masked cross-entropy
//! training, iterative parallel decoding, and single-pass infill.

use std::path::Path;

use mixar_autodiff::{Adam, Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::error::{config, contract, MixarError, Result};
use crate::masking::{self, build_decode_schedule, build_mask, decode_order, MaskSpec, RatioConfig, ScheduleShape};
use crate::nn::{normal_tensor, sample_index, softmax_with_temperature, Block, LayerNorm, Linear};
use crate::optim::{clip_grad_norm, lr_at};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscreteConfig {
    pub vocab: usize,
    pub n_tokens: usize,
    pub n_classes: usize,
    pub n_cls: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub grad_clip: f64,
    pub ratio: RatioConfig,
    pub steps: usize,
    pub schedule: ScheduleShape,
    pub temperature: f64,
    pub infill_temperature: f64,
    pub seed: u64,
}

impl Default for DiscreteConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            n_tokens: 16,
            n_classes: 8,
            n_cls: 4,
            width: 128,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            epochs: 60,
            batch_size: 32,
            lr: 1e-3,
            warmup_frac: 0.05,
            grad_clip: 1.0,
            ratio: RatioConfig::default(),
            steps: 8,
            schedule: ScheduleShape::Cosine,
            temperature: 1.0,
            infill_temperature: 1.0,
            seed: 0,
        }
    }
}

impl DiscreteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.n_tokens == 0 || self.n_classes == 0 || self.width == 0 {
            return Err(config("discrete model dimensions must be positive"));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(config(format!(
                "width {} must be divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.batch_size == 0 {
            return Err(config("batch size must be positive"));
        }
        if self.steps == 0 || self.steps > self.n_tokens {
            return Err(config(format!("decode steps must be in [1, {}]", self.n_tokens)));
        }
        self.ratio.validate()
    }

    pub fn seq_len(&self) -> usize {
        self.n_cls + self.n_tokens
    }
}

/// Replaces masked positions by the mask token (index `vocab`).
pub fn mask_discrete_sequence(x: &[usize], mask: &MaskSpec, vocab: usize) -> Result<Vec<usize>> {
    if x.len() != mask.len() {
        return Err(contract(format!(
            "sequence length {} does not match mask length {}",
            x.len(),
            mask.len()
        )));
    }
    Ok(x.iter()
        .zip(mask.mask())
        .map(|(&t, &m)| if m { vocab } else { t })
        .collect())
}

#[derive(Debug, Clone)]
pub struct DiscreteArModel<T: Real = f32> {
    pub cfg: DiscreteConfig,
    pub store: ParamStore<T>,
    tok_emb: ParamId,
    pos: ParamId,
    class_emb: ParamId,
    cls_pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    pub head: Linear,
    pub loss_history: Vec<f64>,
}

impl<T: Real> DiscreteArModel<T> {
    pub fn new(cfg: DiscreteConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(cfg.seed, "discrete/init");
        let mut store = ParamStore::new();
        let d = cfg.width;
        let tok_emb = store.add("tok_emb", normal_tensor(cfg.vocab + 1, d, 0.02, &mut rng));
        let pos = store.add("pos", normal_tensor(cfg.n_tokens, d, 0.02, &mut rng));
        let class_emb = store.add("class_emb", normal_tensor(cfg.n_classes, d, 0.02, &mut rng));
        let cls_pos = store.add("cls_pos", normal_tensor(cfg.n_cls, d, 0.02, &mut rng));
        let blocks = (0..cfg.layers)
            .map(|l| Block::new(&mut store, &format!("blocks.{l}"), d, cfg.heads, d * cfg.mlp_ratio, &mut rng))
            .collect();
        let ln_f = LayerNorm::new(&mut store, "ln_f", d);
        let head = Linear::new(&mut store, "head", d, cfg.vocab, &mut rng);
        Ok(Self {
            cfg,
            store,
            tok_emb,
            pos,
            class_emb,
            cls_pos,
            blocks,
            ln_f,
            head,
            loss_history: Vec::new(),
        })
    }

    pub fn mask_token(&self) -> usize {
        self.cfg.vocab
    }

    fn check_inputs(&self, tokens: &[usize], classes: &[usize]) -> Result<()> {
        let n = self.cfg.n_tokens;
        if tokens.len() != classes.len() * n {
            return Err(contract(format!(
                "{} tokens for {} sequences of length {n}",
                tokens.len(),
                classes.len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t > self.cfg.vocab) {
            return Err(contract(format!("token {t} outside vocabulary")));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= self.cfg.n_classes) {
            return Err(contract(format!("class {c} outside [0, {})", self.cfg.n_classes)));
        }
        Ok(())
    }

    /// Logits for every token position, `(B*N) x V`. `tokens` may contain the
    /// mask token.
    pub fn logits_graph(&self, g: &mut Graph<T>, tokens: &[usize], classes: &[usize]) -> Var {
        let (n, nc, v1) = (self.cfg.n_tokens, self.cfg.n_cls, self.cfg.vocab + 1);
        let s = nc + n;
        let b = classes.len();
        let mut tab_idx = Vec::with_capacity(b * s);
        let mut pos_idx = Vec::with_capacity(b * s);
        for (bi, &c) in classes.iter().enumerate() {
            for j in 0..nc {
                tab_idx.push(v1 + c);
                pos_idx.push(j);
            }
            for i in 0..n {
                tab_idx.push(tokens[bi * n + i]);
                pos_idx.push(nc + i);
            }
        }
        let tok = g.param(&self.store, self.tok_emb);
        let cls = g.param(&self.store, self.class_emb);
        let table = g.concat_rows(&[tok, cls]);
        let cls_pos = g.param(&self.store, self.cls_pos);
        let pos = g.param(&self.store, self.pos);
        let pos_table = g.concat_rows(&[cls_pos, pos]);
        let e = g.gather_rows(table, &tab_idx);
        let p = g.gather_rows(pos_table, &pos_idx);
        let mut x = g.add(e, p);
        for blk in &self.blocks {
            x = blk.forward(g, &self.store, x, b, s, None);
        }
        let token_rows: Vec<usize> = (0..b).flat_map(|bi| (0..n).map(move |i| bi * s + nc + i)).collect();
        let x = g.gather_rows(x, &token_rows);
        let x = self.ln_f.forward(g, &self.store, x);
        self.head.forward(g, &self.store, x)
    }

    /// Mean cross-entropy over masked positions of the masked inputs.
    pub fn loss_graph(&self, g: &mut Graph<T>, targets: &[usize], masks: &[MaskSpec], classes: &[usize]) -> Result<(Var, Var)> {
        if masks.len() != classes.len() {
            return Err(contract("one mask per sequence required"));
        }
        self.check_inputs(targets, classes)?;
        let n = self.cfg.n_tokens;
        let mut inputs = Vec::with_capacity(targets.len());
        let mut weights = Vec::with_capacity(targets.len());
        for (bi, m) in masks.iter().enumerate() {
            inputs.extend(mask_discrete_sequence(&targets[bi * n..(bi + 1) * n], m, self.cfg.vocab)?);
            weights.extend(m.mask().iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
        let logits = self.logits_graph(g, &inputs, classes);
        let loss = g.cross_entropy(logits, targets, &weights);
        Ok((loss, logits))
    }

    pub fn logits(&self, tokens: &[usize], classes: &[usize]) -> Result<Tensor<T>> {
        self.check_inputs(tokens, classes)?;
        let mut g = Graph::new();
        let l = self.logits_graph(&mut g, tokens, classes);
        Ok(g.value(l).clone())
    }

    /// Iterative decoding from a fully masked sequence, one sequence per class
    /// entry. Positions are committed in random order following the schedule.
    pub fn generate(&self, classes: &[usize], steps: usize, temperature: f64, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
        let n = self.cfg.n_tokens;
        let schedule = build_decode_schedule(n, steps, self.cfg.schedule)?;
        let all: Vec<usize> = (0..n).collect();
        let orders = classes
            .iter()
            .map(|_| decode_order(&all, &schedule, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut tokens = vec![self.mask_token(); classes.len() * n];
        for step in 0..schedule.steps() {
            let logits = self.logits(&tokens, classes)?;
            for (bi, order) in orders.iter().enumerate() {
                for &i in &order[step] {
                    tokens[bi * n + i] = self.sample_row(&logits, bi * n + i, temperature, rng);
                }
            }
        }
        Ok(tokens.chunks(n).map(<[usize]>::to_vec).collect())
    }

    fn sample_row(&self, logits: &Tensor<T>, row: usize, temperature: f64, rng: &mut Rng) -> usize {
        let l: Vec<f64> = logits.row(row).iter().map(|x| x.as_f64()).collect();
        sample_index(&softmax_with_temperature(&l, temperature), rng)
    }

    /// Samples every masked position in one forward pass; unmasked positions
    /// are copied from the input. Each sequence must contain a mask token.
    pub fn infill(&self, masked: &[usize], classes: &[usize], temperature: f64, rng: &mut Rng) -> Result<Vec<usize>> {
        let n = self.cfg.n_tokens;
        self.check_inputs(masked, classes)?;
        for (bi, seq) in masked.chunks(n).enumerate() {
            if !seq.contains(&self.mask_token()) {
                return Err(contract(format!("sequence {bi} has no masked position to infill")));
            }
        }
        let logits = self.logits(masked, classes)?;
        let mut out = masked.to_vec();
        for (i, t) in out.iter_mut().enumerate() {
            if *t == self.mask_token() {
                *t = self.sample_row(&logits, i, temperature, rng);
            }
        }
        Ok(out)
    }

    /// Masked-token training over `tokens` (stacked sequences) with labels.
    pub fn train(&mut self, tokens: &[usize], labels: &[usize]) -> Result<()> {
        self.check_inputs(tokens, labels)?;
        if labels.is_empty() {
            return Err(config("discrete training needs a nonempty dataset"));
        }
        let n = self.cfg.n_tokens;
        let mut data_rng = rng::stream(self.cfg.seed, "discrete/data");
        let mut mask_rng = rng::stream(self.cfg.seed, "discrete/mask");
        let mut opt = Adam::new(&self.store);
        let bs = self.cfg.batch_size.min(labels.len());
        let steps_per_epoch = labels.len().div_ceil(bs);
        let total = steps_per_epoch * self.cfg.epochs;
        let mut step = 0;
        for epoch in 0..self.cfg.epochs {
            let mut order: Vec<usize> = (0..labels.len()).collect();
            order.shuffle(&mut data_rng);
            let mut sum = 0.0;
            for chunk in order.chunks(bs) {
                let targets: Vec<usize> = chunk.iter().flat_map(|&i| tokens[i * n..(i + 1) * n].iter().copied()).collect();
                let classes: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let masks = chunk
                    .iter()
                    .map(|_| {
                        let r = masking::sample_mask_ratio(&mut mask_rng, &self.cfg.ratio)?;
                        build_mask(n, r, &mut mask_rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut g = Graph::new();
                let (loss, _) = self.loss_graph(&mut g, &targets, &masks, &classes)?;
                let l = g.scalar(loss).as_f64();
                if !l.is_finite() {
                    return Err(MixarError::Numerical(format!(
                        "discrete model loss became non-finite at epoch {epoch}"
                    )));
                }
                let mut grads = g.backward(loss).into_params();
                clip_grad_norm(&mut grads, self.cfg.grad_clip);
                opt.step(&mut self.store, &grads, lr_at(step, total, self.cfg.lr, self.cfg.warmup_frac));
                step += 1;
                sum += l;
            }
            self.loss_history.push(sum / steps_per_epoch as f64);
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = json!({
            "kind": "discrete_generator",
            "config": self.cfg,
            "loss_history": self.loss_history,
            "seed": self.cfg.seed,
        });
        checkpoint::save(dir, &manifest, &checkpoint::store_arrays("", &self.store))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, arrays) = checkpoint::load(dir)?;
        let cfg: DiscreteConfig = serde_json::from_value(checkpoint::get_field(&manifest, "config")?.clone())?;
        let mut m = Self::new(cfg)?;
        checkpoint::fill_store("", &mut m.store, &arrays)?;
        m.loss_history = serde_json::from_value(manifest["loss_history"].clone()).unwrap_or_default();
        Ok(m)
    }
}
