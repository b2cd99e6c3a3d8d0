use mixar_autodiff::{Adam, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::backbone::BackboneInput;
use crate::diffusion_head::sample_noise;
use crate::discrete_generator::{mask_discrete_sequence, DiscreteArModel};
use crate::error::{config, MixarError, Result};
use crate::masking::{build_mask, sample_mask_ratio, MaskSpec};
use crate::mixture::{lambda_schedule, ti_mix};
use crate::optim::{clip_grad_norm, lr_at};
use crate::rng::{self, Rng};
use crate::tokenizers::Tokenizers;
use crate::toy_data::ImageBatch;

use super::metrics::MetricsRecord;
use super::model::MixarModel;

/// Images tokenized both ways, with labels.
#[derive(Debug, Clone)]
pub struct TokenizedSet {
    pub n_tokens: usize,
    /// `(len*N) x d_c`
    pub x_c: Tensor<f32>,
    pub x_d: Vec<usize>,
    pub labels: Vec<usize>,
}

impl TokenizedSet {
    pub fn from_images(images: &ImageBatch, tokenizers: &Tokenizers) -> Result<Self> {
        let c = tokenizers.continuous.encode(images)?;
        let d = tokenizers.vq.tokenize(images)?;
        Ok(Self {
            n_tokens: c.n(),
            x_c: c.tokens,
            x_d: d.indices,
            labels: images.labels.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn rows(&self, items: &[usize]) -> Vec<usize> {
        let n = self.n_tokens;
        items.iter().flat_map(|&i| i * n..(i + 1) * n).collect()
    }

    pub fn continuous(&self, items: &[usize]) -> Tensor<f32> {
        self.x_c.select_rows(&self.rows(items))
    }

    pub fn discrete(&self, items: &[usize]) -> Vec<usize> {
        self.rows(items).into_iter().map(|r| self.x_d[r]).collect()
    }

    pub fn classes(&self, items: &[usize]) -> Vec<usize> {
        items.iter().map(|&i| self.labels[i]).collect()
    }
}

/// One batch as seen by the loss: continuous tokens, the flattened mask,
/// guidance (when the variant uses it) and classes.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub x_c: Tensor<f32>,
    pub masks: Vec<MaskSpec>,
    pub guidance: Option<Vec<usize>>,
    pub classes: Vec<usize>,
}

impl StepInputs {
    pub fn flat_mask(&self) -> Vec<bool> {
        self.masks.iter().flat_map(|m| m.mask().iter().copied()).collect()
    }
}

/// Timesteps and noise for every loss row.
#[derive(Debug, Clone)]
pub struct Noise {
    pub ts: Vec<usize>,
    pub eps: Tensor<f32>,
}

/// Rows of the stacked batch that enter the loss: each masked position,
/// repeated `mul` times.
pub fn loss_rows(mask: &[bool], mul: usize) -> Vec<usize> {
    let masked: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    (0..mul).flat_map(|_| masked.iter().copied()).collect()
}

impl MixarModel {
    pub fn draw_noise(&self, inputs: &StepInputs, rng: &mut Rng) -> Noise {
        let rows = loss_rows(&inputs.flat_mask(), self.cfg.diffusion_batch_mul).len();
        let (ts, eps) = sample_noise(rows, self.cfg.backbone.d_c, &self.schedule, rng);
        Noise { ts, eps }
    }

    /// Diffusion loss over the masked positions. Returns the loss and the
    /// backbone output `z` for all positions.
    pub fn loss_graph(
        &self,
        g: &mut Graph<f32>,
        store: &ParamStore<f32>,
        inputs: &StepInputs,
        noise: &Noise,
    ) -> Result<(Var, Var)> {
        let mask = inputs.flat_mask();
        let out = self.backbone.forward(
            g,
            store,
            &BackboneInput {
                x_c: &inputs.x_c,
                mask: &mask,
                guidance: inputs.guidance.as_deref(),
                classes: &inputs.classes,
            },
        )?;
        let rows = loss_rows(&mask, self.cfg.diffusion_batch_mul);
        let z = g.gather_rows(out.z, &rows);
        let x0 = inputs.x_c.select_rows(&rows);
        let loss = self.head.loss_graph(g, store, z, &x0, &noise.ts, &noise.eps, &self.schedule)?;
        Ok((loss, out.z))
    }

    pub fn loss_value(&self, store: &ParamStore<f32>, inputs: &StepInputs, noise: &Noise) -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = self.loss_graph(&mut g, store, inputs, noise)?;
        Ok(g.scalar(loss) as f64)
    }
}

/// Guidance for a batch: ground truth when `lambda >= 1`, otherwise a
/// per-position blend with the generator's single-pass infill of the masked
/// positions. Returns the guidance and whether the generator was invoked.
pub fn mixed_guidance(
    x_d: &[usize],
    masks: &[MaskSpec],
    classes: &[usize],
    lambda: f64,
    generator: Option<&DiscreteArModel>,
    rng: &mut Rng,
) -> Result<(Vec<usize>, bool)> {
    if lambda >= 1.0 {
        return Ok((x_d.to_vec(), false));
    }
    let Some(gm) = generator else {
        return Err(config(format!(
            "guidance ratio {lambda} < 1 needs a trained discrete generator"
        )));
    };
    let n = gm.cfg.n_tokens;
    let mut masked = Vec::with_capacity(x_d.len());
    for (b, m) in masks.iter().enumerate() {
        masked.extend(mask_discrete_sequence(&x_d[b * n..(b + 1) * n], m, gm.cfg.vocab)?);
    }
    let x_hat = gm.infill(&masked, classes, gm.cfg.infill_temperature, rng)?;
    let mut out = Vec::with_capacity(x_d.len());
    for (b, m) in masks.iter().enumerate() {
        let r = b * n..(b + 1) * n;
        out.extend(ti_mix(&x_d[r.clone()], &x_hat[r], m, lambda, rng)?.tokens);
    }
    Ok((out, true))
}

fn draw_masks(count: usize, n: usize, model: &MixarModel, rng: &mut Rng) -> Result<Vec<MaskSpec>> {
    (0..count)
        .map(|_| {
            let r = sample_mask_ratio(rng, &model.cfg.ratio)?;
            build_mask(n, r, rng)
        })
        .collect()
}

/// Trains from `model.epochs_done` up to `model.cfg.epochs`. The learning-rate
/// schedule (warmup, cosine) spans the epochs run by this call, so a loaded
/// checkpoint can be continued under a new config. `on_eval` may fill in the
/// optional fields of each record before it is stored.
pub fn train_mixar(
    model: &mut MixarModel,
    train: &TokenizedSet,
    val: &TokenizedSet,
    generator: Option<&DiscreteArModel>,
    mut on_eval: impl FnMut(&MixarModel, &mut MetricsRecord) -> Result<()>,
) -> Result<()> {
    let cfg = model.cfg.clone();
    let (start, end) = (model.epochs_done, cfg.epochs);
    if start >= end {
        return Ok(());
    }
    if train.is_empty() {
        return Err(config("training set is empty"));
    }
    let uses_guidance = cfg.variant.uses_guidance();
    let needs_gen = uses_guidance && (start..end).any(|e| lambda_schedule(e, end, &cfg.ti_mix) < 1.0);
    if needs_gen && generator.is_none() {
        return Err(config("TI-Mix is enabled but no discrete generator checkpoint was given"));
    }
    let n = cfg.backbone.n_tokens;
    let tag = |s: &str| format!("mixar/{s}/{start}");
    let mut data_rng = rng::stream(cfg.seeds.data, &tag("data"));
    let mut mask_rng = rng::stream(cfg.seeds.masking, &tag("mask"));
    let mut diff_rng = rng::stream(cfg.seeds.diffusion, &tag("diffusion"));
    let mut mix_rng = rng::stream(cfg.seeds.ti_mix, &tag("ti_mix"));
    let plan = ValidationPlan::new(model, val)?;

    let bs = cfg.batch_size.min(train.len());
    let steps_per_epoch = train.len().div_ceil(bs);
    let total = steps_per_epoch * (end - start);
    let mut opt = Adam::new(&model.store);
    let mut step = 0;
    for epoch in start..end {
        let lambda = lambda_schedule(epoch, end, &cfg.ti_mix);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut data_rng);
        let mut sum = 0.0;
        for chunk in order.chunks(bs) {
            let mut classes = train.classes(chunk);
            if cfg.class_dropout > 0.0 {
                for c in classes.iter_mut() {
                    if data_rng.random::<f64>() < cfg.class_dropout {
                        *c = cfg.backbone.null_class();
                    }
                }
            }
            let masks = draw_masks(chunk.len(), n, model, &mut mask_rng)?;
            let guidance = if uses_guidance {
                let (gd, invoked) =
                    mixed_guidance(&train.discrete(chunk), &masks, &train.classes(chunk), lambda, generator, &mut mix_rng)?;
                model.generator_calls += u64::from(invoked);
                Some(gd)
            } else {
                None
            };
            let inputs = StepInputs {
                x_c: train.continuous(chunk),
                masks,
                guidance,
                classes,
            };
            let noise = model.draw_noise(&inputs, &mut diff_rng);
            let mut g = Graph::new();
            let (loss, _) = model.loss_graph(&mut g, &model.store, &inputs, &noise)?;
            let l = g.scalar(loss) as f64;
            if !l.is_finite() {
                return Err(MixarError::Numerical(format!("diffusion loss became non-finite at epoch {epoch}")));
            }
            let mut grads = g.backward(loss).into_params();
            clip_grad_norm(&mut grads, cfg.grad_clip);
            opt.step(&mut model.store, &grads, lr_at(step, total, cfg.lr, cfg.warmup_frac));
            model.ema.update(&model.store);
            step += 1;
            sum += l;
        }
        let train_loss = sum / steps_per_epoch as f64;
        model.train_loss.push(train_loss);
        model.epochs_done = epoch + 1;
        if (epoch + 1) % cfg.eval_every.max(1) == 0 || epoch + 1 == end {
            let val_loss_gt = plan.loss(model, GuidanceSource::GroundTruth)?;
            let val_loss_gen = match generator {
                Some(gm) if uses_guidance => Some(plan.loss(model, GuidanceSource::Generated(gm))?),
                _ => None,
            };
            let mut record = MetricsRecord {
                epoch: epoch + 1,
                train_loss,
                val_loss_gt,
                val_loss_gen,
                frechet: None,
                sample_grid: None,
            };
            on_eval(model, &mut record)?;
            model.metrics.push(record);
        }
    }
    Ok(())
}

/// Where masked-position guidance comes from during evaluation.
#[derive(Clone, Copy)]
pub enum GuidanceSource<'a> {
    GroundTruth,
    /// Single-pass infill of the masked positions by the discrete generator.
    Generated(&'a DiscreteArModel),
}

/// Held-out batches with masks and noise fixed by the run's seeds, so every
/// evaluation (and both arms of a paired comparison) sees the same draws.
#[derive(Debug, Clone)]
pub struct ValidationPlan {
    batches: Vec<(StepInputs, Noise, Vec<usize>)>,
    infill_seed: u64,
}

impl ValidationPlan {
    pub fn new(model: &MixarModel, val: &TokenizedSet) -> Result<Self> {
        Self::with_batches(model, val, model.cfg.eval_batches)
    }

    pub fn with_batches(model: &MixarModel, val: &TokenizedSet, n_batches: usize) -> Result<Self> {
        if val.is_empty() {
            return Err(config("validation set is empty"));
        }
        let cfg = &model.cfg;
        let n = cfg.backbone.n_tokens;
        let mut rng = rng::stream(cfg.seeds.diffusion, "mixar/val");
        let bs = cfg.batch_size.min(val.len());
        let mut batches = Vec::new();
        for b in 0..n_batches {
            let items: Vec<usize> = (0..bs).map(|k| (b * bs + k) % val.len()).collect();
            let masks = draw_masks(items.len(), n, model, &mut rng)?;
            let inputs = StepInputs {
                x_c: val.continuous(&items),
                masks,
                guidance: cfg.variant.uses_guidance().then(|| val.discrete(&items)),
                classes: val.classes(&items),
            };
            let noise = model.draw_noise(&inputs, &mut rng);
            batches.push((inputs, noise, items));
        }
        Ok(Self {
            batches,
            infill_seed: rng::derive_seed(cfg.seeds.ti_mix, "mixar/val/infill"),
        })
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// Mean held-out diffusion loss under the EMA weights.
    pub fn loss(&self, model: &MixarModel, source: GuidanceSource<'_>) -> Result<f64> {
        let mut infill_rng = rng::from_seed(self.infill_seed);
        let mut sum = 0.0;
        for (inputs, noise, _) in &self.batches {
            let mut inputs = inputs.clone();
            if let (GuidanceSource::Generated(gm), Some(gt)) = (source, &inputs.guidance) {
                let (gd, _) = mixed_guidance(gt, &inputs.masks, &inputs.classes, 0.0, Some(gm), &mut infill_rng)?;
                inputs.guidance = Some(gd);
            }
            sum += model.loss_value(model.eval_store(), &inputs, noise)?;
        }
        Ok(sum / self.batches.len().max(1) as f64)
    }
}

/// Held-out diffusion loss with ground-truth guidance and with generated
/// guidance at the masked positions, over the same masks and noise.
pub fn train_eval_gap(
    model: &MixarModel,
    val: &TokenizedSet,
    generator: &DiscreteArModel,
    n_batches: usize,
) -> Result<(f64, f64)> {
    let plan = ValidationPlan::with_batches(model, val, n_batches)?;
    Ok((
        plan.loss(model, GuidanceSource::GroundTruth)?,
        plan.loss(model, GuidanceSource::Generated(generator))?,
    ))
}
