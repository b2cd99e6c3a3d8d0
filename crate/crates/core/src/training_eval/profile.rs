use std::time::Instant;

use mixar_autodiff::{Graph, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{attention_pairs, backbone_parameters, token_counts, Backbone, BackboneConfig, BackboneInput, GuidanceVariant, TokenCounts};
use crate::diffusion_head::{sample_noise, DenoiserHead, DiffusionSchedule, HeadConfig};
use crate::error::{contract, Result};
use crate::masking::build_mask;
use crate::nn::normal_tensor;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileDims {
    pub n_tokens: usize,
    pub n_cls: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab: usize,
    pub d_c: usize,
    pub d_d: usize,
    pub n_classes: usize,
    pub head: HeadConfig,
}

impl Default for ProfileDims {
    fn default() -> Self {
        Self::from_config(&BackboneConfig::default(), &HeadConfig::default())
    }
}

impl ProfileDims {
    pub fn from_config(b: &BackboneConfig, head: &HeadConfig) -> Self {
        Self {
            n_tokens: b.n_tokens,
            n_cls: b.n_cls,
            layers: b.layers,
            width: b.width,
            heads: b.heads,
            mlp_ratio: b.mlp_ratio,
            vocab: b.vocab,
            d_c: b.d_c,
            d_d: b.d_d,
            n_classes: b.n_classes,
            head: head.clone(),
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            n_tokens: self.n_tokens,
            n_cls: self.n_cls,
            n_classes: self.n_classes,
            d_c: self.d_c,
            d_d: self.d_d,
            vocab: self.vocab,
            width: self.width,
            layers: self.layers,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }
}

/// What to time besides the exact counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub repeats: usize,
    pub decode_steps: usize,
    pub t_sample: usize,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            repeats: 3,
            decode_steps: 8,
            t_sample: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub variant: GuidanceVariant,
    pub dims: ProfileDims,
    pub tokens: TokenCounts,
    pub attention_pairs: u64,
    pub attention_pairs_measured: u64,
    pub backbone_params: usize,
    pub backbone_params_measured: usize,
    pub head_params: usize,
    pub total_params: usize,
    /// Forward plus backward of the training loss for one sequence.
    pub train_step_ms: Option<f64>,
    /// Decode steps times one backbone forward, plus `t_sample` head
    /// evaluations over all `N` tokens; each timed once and multiplied out.
    pub sample_ms_per_image: Option<f64>,
    /// Bytes held on the autodiff tape by one training step.
    pub peak_live_bytes: Option<usize>,
}

impl CostReport {
    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("not measured".to_string(), |x| format!("{x:.3}"));
        let mut s = String::new();
        s += &format!("variant: {}\n", self.variant);
        s += &format!("N: {}\ncls_tokens: {}\nlayers: {}\nwidth: {}\nvocab: {}\n", self.dims.n_tokens, self.dims.n_cls, self.dims.layers, self.dims.width, self.dims.vocab);
        s += &format!("tokens_with_cls: {}\n", self.tokens.with_cls);
        s += &format!("tokens_without_cls: {}\n", self.tokens.without_cls);
        s += &format!("attention_pairs: {}\n", self.attention_pairs);
        s += &format!("attention_pairs_measured: {}\n", self.attention_pairs_measured);
        s += &format!("backbone_params: {}\n", self.backbone_params);
        s += &format!("head_params: {}\n", self.head_params);
        s += &format!("total_params: {}\n", self.total_params);
        s += &format!("train_step_ms: {}\n", opt(self.train_step_ms));
        s += &format!("sample_ms_per_image: {}\n", opt(self.sample_ms_per_image));
        s += &format!(
            "peak_live_bytes: {}\n",
            self.peak_live_bytes.map_or("not measured".to_string(), |b| b.to_string())
        );
        s
    }
}

fn build(variant: GuidanceVariant, cfg: &BackboneConfig, store: &mut ParamStore<f32>) -> Result<Backbone<f32>> {
    let mut rng = rng::stream(0, "profile/codebook");
    let codebook = (variant == GuidanceVariant::DcMix).then(|| normal_tensor(cfg.vocab, cfg.d_d, 1.0, &mut rng));
    Backbone::new(store, cfg.clone(), variant, codebook, 0)
}

fn inputs(cfg: &BackboneConfig, variant: GuidanceVariant, mask: Vec<bool>) -> (Tensor<f32>, Vec<bool>, Option<Vec<usize>>) {
    let mut rng = rng::stream(0, "profile/inputs");
    let x = normal_tensor(cfg.n_tokens, cfg.d_c, 1.0, &mut rng);
    let gd = variant.uses_guidance().then(|| (0..cfg.n_tokens).map(|i| i % cfg.vocab).collect());
    (x, mask, gd)
}

fn time_ms(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(best)
}

/// Exact token, attention-pair and parameter counts for `variant`, each
/// checked against an instrumented build. With `timing`, also wall-clock
/// and tape memory at the full dims.
pub fn profile_variant(variant: GuidanceVariant, dims: &ProfileDims, timing: Option<Timing>) -> Result<CostReport> {
    let cfg = dims.backbone_config();
    cfg.validate()?;
    let tokens = token_counts(variant, dims.n_tokens, dims.n_cls);
    let pairs = attention_pairs(variant, dims.n_tokens, dims.n_cls, dims.layers);
    let backbone_params = backbone_parameters(variant, &cfg);
    let head_params = DenoiserHead::num_params(&dims.head, dims.d_c, dims.width);

    let mut store = ParamStore::new();
    let backbone = build(variant, &cfg, &mut store)?;
    let backbone_params_measured = store.num_scalars();

    // pair counts do not depend on width, so count them on a narrow copy
    let narrow = BackboneConfig {
        width: cfg.heads,
        mlp_ratio: 1,
        ..cfg.clone()
    };
    let mut narrow_store = ParamStore::new();
    let narrow_bb = build(variant, &narrow, &mut narrow_store)?;
    let (x, mask, gd) = inputs(&narrow, variant, vec![false; narrow.n_tokens]);
    let mut g = Graph::new();
    let out = narrow_bb.forward(
        &mut g,
        &narrow_store,
        &BackboneInput {
            x_c: &x,
            mask: &mask,
            guidance: gd.as_deref(),
            classes: &[0],
        },
    )?;
    let attention_pairs_measured = out.attention_pairs;
    if attention_pairs_measured != pairs || backbone_params_measured != backbone_params {
        return Err(contract(format!(
            "{variant}: analytic counts (pairs {pairs}, params {backbone_params}) differ from instrumented ({attention_pairs_measured}, {backbone_params_measured})"
        )));
    }

    let mut report = CostReport {
        variant,
        dims: dims.clone(),
        tokens,
        attention_pairs: pairs,
        attention_pairs_measured,
        backbone_params,
        backbone_params_measured,
        head_params,
        total_params: backbone_params + head_params,
        train_step_ms: None,
        sample_ms_per_image: None,
        peak_live_bytes: None,
    };
    let Some(timing) = timing else {
        return Ok(report);
    };

    let head = DenoiserHead::new(&mut store, dims.head.clone(), dims.d_c, dims.width, 0)?;
    let schedule = DiffusionSchedule::cosine(1000);
    let mut rng = rng::stream(0, "profile/mask");
    let m = build_mask(dims.n_tokens, 0.85, &mut rng)?;
    let (x, mask, gd) = inputs(&cfg, variant, m.mask().to_vec());
    let masked: Vec<usize> = m.masked_positions().to_vec();
    let (ts, eps) = sample_noise::<f32>(masked.len(), dims.d_c, &schedule, &mut rng);
    let x0 = x.select_rows(&masked);
    let input = BackboneInput {
        x_c: &x,
        mask: &mask,
        guidance: gd.as_deref(),
        classes: &[0],
    };
    let mut live = 0;
    let train_ms = time_ms(timing.repeats, || {
        let mut g = Graph::new();
        let out = backbone.forward(&mut g, &store, &input)?;
        let z = g.gather_rows(out.z, &masked);
        let loss = head.loss_graph(&mut g, &store, z, &x0, &ts, &eps, &schedule)?;
        live = g.live_bytes();
        let _ = g.backward(loss);
        Ok(())
    })?;
    let forward_ms = time_ms(timing.repeats, || {
        let mut g = Graph::new();
        backbone.forward(&mut g, &store, &input)?;
        Ok(())
    })?;
    let z = normal_tensor::<f32>(dims.n_tokens, dims.width, 1.0, &mut rng);
    let xt = normal_tensor::<f32>(dims.n_tokens, dims.d_c, 1.0, &mut rng);
    let head_ms = time_ms(timing.repeats, || {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let xv = g.constant(xt.clone());
        head.forward(&mut g, &store, xv, &vec![500; dims.n_tokens], zv);
        Ok(())
    })?;
    report.train_step_ms = Some(train_ms);
    report.sample_ms_per_image = Some(timing.decode_steps as f64 * forward_ms + timing.t_sample as f64 * head_ms);
    report.peak_live_bytes = Some(live);
    Ok(report)
}
