use std::path::Path;

use mixar_autodiff::{ParamStore, Tensor};
use serde_json::json;

use crate::backbone::{backbone_parameters, Backbone};
use crate::checkpoint;
use crate::diffusion_head::{DenoiserHead, DiffusionSchedule};
use crate::error::{contract, Result};
use crate::optim::Ema;

use super::config::TrainConfig;
use super::metrics::MetricsRecord;

/// Backbone plus diffusion head sharing one parameter store, with an EMA copy
/// of the weights used for evaluation and sampling.
#[derive(Debug, Clone)]
pub struct MixarModel {
    pub cfg: TrainConfig,
    pub store: ParamStore<f32>,
    pub backbone: Backbone<f32>,
    pub head: DenoiserHead,
    pub ema: Ema<f32>,
    pub schedule: DiffusionSchedule,
    pub epochs_done: usize,
    /// Batches for which the discrete generator was asked for guidance.
    pub generator_calls: u64,
    pub metrics: Vec<MetricsRecord>,
    pub train_loss: Vec<f64>,
}

impl MixarModel {
    /// `codebook` is the discrete tokenizer's codeword table; DC-Mix needs it,
    /// the other variants ignore it.
    pub fn new(cfg: TrainConfig, codebook: Option<Tensor<f32>>) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, cfg.backbone.clone(), cfg.variant, codebook, cfg.seeds.init)?;
        let head = DenoiserHead::new(&mut store, cfg.head.clone(), cfg.backbone.d_c, cfg.backbone.width, cfg.seeds.init)?;
        let schedule = DiffusionSchedule::from_config(&cfg.diffusion)?;
        let ema = Ema::new(&store, cfg.ema_decay);
        Ok(Self {
            cfg,
            store,
            backbone,
            head,
            ema,
            schedule,
            epochs_done: 0,
            generator_calls: 0,
            metrics: Vec::new(),
            train_loss: Vec::new(),
        })
    }

    /// Weights used for evaluation and sampling.
    pub fn eval_store(&self) -> &ParamStore<f32> {
        &self.ema.params
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Analytic count, backbone and head together.
    pub fn expected_params(cfg: &TrainConfig) -> usize {
        backbone_parameters(cfg.variant, &cfg.backbone)
            + DenoiserHead::num_params(&cfg.head, cfg.backbone.d_c, cfg.backbone.width)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = json!({
            "kind": "mixar",
            "variant": self.cfg.variant,
            "config": self.cfg,
            "seeds": self.cfg.seeds,
            "epochs_done": self.epochs_done,
            "generator_calls": self.generator_calls,
            "ema_updates": self.ema.updates(),
            "train_loss": self.train_loss,
            "metrics": self.metrics,
            "num_params": self.num_params(),
        });
        let mut arrays = checkpoint::store_arrays("raw/", &self.store);
        arrays.extend(checkpoint::store_arrays("ema/", &self.ema.params));
        if let Some(cb) = self.backbone.codebook() {
            arrays.push(mixar_autodiff::io::NamedArray::from_tensor("codebook", cb));
        }
        checkpoint::save(dir, &manifest, &arrays)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, arrays) = checkpoint::load(dir)?;
        if manifest["kind"] != "mixar" {
            return Err(contract(format!("{} is not a MixAR checkpoint", dir.display())));
        }
        let cfg: TrainConfig = serde_json::from_value(checkpoint::get_field(&manifest, "config")?.clone())?;
        let codebook = checkpoint::find(&arrays, "codebook").ok().map(|a| a.to_tensor());
        let mut m = Self::new(cfg, codebook)?;
        checkpoint::fill_store("raw/", &mut m.store, &arrays)?;
        checkpoint::fill_store("ema/", &mut m.ema.params, &arrays)?;
        m.ema.set_updates(manifest["ema_updates"].as_u64().unwrap_or(0));
        m.epochs_done = manifest["epochs_done"].as_u64().unwrap_or(0) as usize;
        m.generator_calls = manifest["generator_calls"].as_u64().unwrap_or(0);
        m.train_loss = serde_json::from_value(manifest["train_loss"].clone()).unwrap_or_default();
        m.metrics = serde_json::from_value(manifest["metrics"].clone()).unwrap_or_default();
        Ok(m)
    }
}
