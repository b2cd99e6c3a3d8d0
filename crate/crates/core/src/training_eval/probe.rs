use std::path::Path;

use mixar_autodiff::{Adam, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::error::{config, contract, Result};
use crate::nn::Linear;
use crate::optim::lr_at;
use crate::rng;
use crate::toy_data::ImageBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 30,
            batch_size: 64,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// One-hidden-layer classifier on raw pixels. Its hidden activations are the
/// feature space of the Fréchet surrogate.
#[derive(Debug, Clone)]
pub struct Probe {
    pub cfg: ProbeConfig,
    pub n_classes: usize,
    pub input_dim: usize,
    store: ParamStore<f32>,
    fc1: Linear,
    fc2: Linear,
}

impl Probe {
    pub fn new(cfg: ProbeConfig, input_dim: usize, n_classes: usize) -> Result<Self> {
        if cfg.hidden == 0 || cfg.batch_size == 0 || n_classes < 2 {
            return Err(config("probe needs hidden > 0, batch_size > 0 and at least two classes"));
        }
        let mut store = ParamStore::new();
        let mut rng = rng::stream(cfg.seed, "probe/init");
        let fc1 = Linear::new(&mut store, "probe.fc1", input_dim, cfg.hidden, &mut rng);
        let fc2 = Linear::new(&mut store, "probe.fc2", cfg.hidden, n_classes, &mut rng);
        Ok(Self {
            cfg,
            n_classes,
            input_dim,
            store,
            fc1,
            fc2,
        })
    }

    fn input(&self, images: &ImageBatch) -> Result<Tensor<f32>> {
        if images.pixels_per_image() != self.input_dim {
            return Err(contract(format!(
                "probe expects {} pixels per image, got {}",
                self.input_dim,
                images.pixels_per_image()
            )));
        }
        Ok(Tensor::from_vec(images.len(), self.input_dim, images.pixels.clone()))
    }

    fn graph(&self, g: &mut Graph<f32>, x: Var) -> (Var, Var) {
        let h = self.fc1.forward(g, &self.store, x);
        let h = g.gelu(h);
        let logits = self.fc2.forward(g, &self.store, h);
        (h, logits)
    }

    pub fn train(&mut self, images: &ImageBatch) -> Result<()> {
        if images.is_empty() {
            return Err(config("probe training set is empty"));
        }
        let x = self.input(images)?;
        let mut data_rng = rng::stream(self.cfg.seed, "probe/data");
        let mut opt = Adam::new(&self.store);
        let bs = self.cfg.batch_size.min(images.len());
        let total = images.len().div_ceil(bs) * self.cfg.epochs;
        let mut step = 0;
        for _ in 0..self.cfg.epochs {
            let mut order: Vec<usize> = (0..images.len()).collect();
            order.shuffle(&mut data_rng);
            for chunk in order.chunks(bs) {
                let mut g = Graph::new();
                let xb = g.constant(x.select_rows(chunk));
                let (_, logits) = self.graph(&mut g, xb);
                let targets: Vec<usize> = chunk.iter().map(|&i| images.labels[i]).collect();
                let loss = g.cross_entropy(logits, &targets, &vec![1.0; chunk.len()]);
                let grads = g.backward(loss).into_params();
                opt.step(&mut self.store, &grads, lr_at(step, total, self.cfg.lr, 0.05));
                step += 1;
            }
        }
        Ok(())
    }

    /// Hidden features and logits for every image.
    pub fn forward(&self, images: &ImageBatch) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let x = self.input(images)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (h, l) = self.graph(&mut g, xv);
        Ok((g.value(h).clone(), g.value(l).clone()))
    }

    pub fn features(&self, images: &ImageBatch) -> Result<Tensor<f64>> {
        Ok(self.forward(images)?.0.cast())
    }

    pub fn predict(&self, images: &ImageBatch) -> Result<Vec<usize>> {
        let (_, logits) = self.forward(images)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    /// Fraction of images whose predicted class equals their label.
    pub fn accuracy(&self, images: &ImageBatch) -> Result<f64> {
        if images.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(images)?;
        let hits = pred.iter().zip(&images.labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / images.len() as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = json!({
            "kind": "probe",
            "config": self.cfg,
            "n_classes": self.n_classes,
            "input_dim": self.input_dim,
        });
        checkpoint::save(dir, &manifest, &checkpoint::store_arrays("", &self.store))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, arrays) = checkpoint::load(dir)?;
        let cfg: ProbeConfig = serde_json::from_value(checkpoint::get_field(&manifest, "config")?.clone())?;
        let n_classes = checkpoint::get_field(&manifest, "n_classes")?.as_u64().unwrap_or(0) as usize;
        let input_dim = checkpoint::get_field(&manifest, "input_dim")?.as_u64().unwrap_or(0) as usize;
        let mut p = Self::new(cfg, input_dim, n_classes)?;
        checkpoint::fill_store("", &mut p.store, &arrays)?;
        Ok(p)
    }
}
