use mixar_autodiff::{Graph, Tensor};

use crate::backbone::BackboneInput;
use crate::discrete_generator::DiscreteArModel;
use crate::error::{config, contract, Result};
use crate::masking::{build_decode_schedule, decode_order};
use crate::mixture::Provenance;
use crate::rng::{self, Rng};
use crate::tokenizers::{ContinuousSequence, Tokenizers};
use crate::toy_data::ImageBatch;

use super::config::GenerateConfig;
use super::model::MixarModel;

#[derive(Debug, Clone)]
pub struct Generated {
    pub images: ImageBatch,
    pub tokens: ContinuousSequence,
    /// Discrete guidance drawn from the generator, when the variant uses it.
    pub guidance: Option<Vec<usize>>,
    /// Final provenance of every position, per image.
    pub provenance: Vec<Vec<Provenance>>,
    /// Head forward passes per committed token.
    pub head_evaluations: usize,
}

/// Class-conditional sampling: discrete tokens from the generator, then
/// iterative masked decoding of the continuous tokens guided by them, then
/// the continuous tokenizer's decoder. Images are produced in chunks of
/// `cfg.batch_size`; each chunk draws from its own seeded stream.
pub fn generate_images(
    generator: Option<&DiscreteArModel>,
    model: &MixarModel,
    tokenizers: &Tokenizers,
    classes: &[usize],
    cfg: &GenerateConfig,
) -> Result<Generated> {
    let bcfg = &model.cfg.backbone;
    let uses_guidance = model.cfg.variant.uses_guidance();
    if uses_guidance && generator.is_none() {
        return Err(config(format!("variant {} samples need a discrete generator", model.cfg.variant)));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= bcfg.n_classes) {
        return Err(contract(format!("class {c} out of range")));
    }
    let n = bcfg.n_tokens;
    let grid = tokenizers.continuous.cfg.grid();
    if grid.0 * grid.1 != n || tokenizers.continuous.cfg.d_c != bcfg.d_c {
        return Err(contract("tokenizer geometry does not match the model"));
    }
    let mut tokens = Tensor::zeros(classes.len() * n, bcfg.d_c);
    let mut all_guidance = Vec::new();
    let mut provenance = Vec::with_capacity(classes.len());
    let mut evals = 0;
    for (ci, chunk) in classes.chunks(cfg.batch_size.max(1)).enumerate() {
        let mut rng = rng::stream(cfg.seed, &format!("generate/{ci}"));
        let out = generate_chunk(generator, model, chunk, cfg, &mut rng)?;
        let base = ci * cfg.batch_size.max(1) * n;
        for r in 0..out.tokens.rows() {
            tokens.row_mut(base + r).copy_from_slice(out.tokens.row(r));
        }
        if let Some(gd) = out.guidance {
            all_guidance.extend(gd);
        }
        provenance.extend(out.provenance);
        evals = out.head_evaluations;
    }
    let seq = ContinuousSequence { grid, tokens };
    let mut images = tokenizers.continuous.decode(&seq)?;
    images.labels = classes.to_vec();
    Ok(Generated {
        images,
        tokens: seq,
        guidance: uses_guidance.then_some(all_guidance),
        provenance,
        head_evaluations: evals,
    })
}

struct Chunk {
    tokens: Tensor<f32>,
    guidance: Option<Vec<usize>>,
    provenance: Vec<Vec<Provenance>>,
    head_evaluations: usize,
}

fn generate_chunk(
    generator: Option<&DiscreteArModel>,
    model: &MixarModel,
    classes: &[usize],
    cfg: &GenerateConfig,
    rng: &mut Rng,
) -> Result<Chunk> {
    let bcfg = &model.cfg.backbone;
    let (b, n) = (classes.len(), bcfg.n_tokens);
    let store = model.eval_store();
    let guidance = match generator {
        Some(gm) if model.cfg.variant.uses_guidance() => {
            let seqs = gm.generate(classes, cfg.discrete_steps, cfg.discrete_temperature, rng)?;
            Some(seqs.concat())
        }
        _ => None,
    };
    let schedule = build_decode_schedule(n, cfg.steps, cfg.schedule)?;
    let all: Vec<usize> = (0..n).collect();
    let orders = (0..b).map(|_| decode_order(&all, &schedule, rng)).collect::<Result<Vec<_>>>()?;
    let mut x_c = Tensor::zeros(b * n, bcfg.d_c);
    let mut mask = vec![true; b * n];
    let null = vec![bcfg.null_class(); b];
    let mut diff = model.cfg.diffusion.clone();
    diff.t_sample = cfg.t_sample;
    diff.temperature = cfg.temperature;
    diff.validate()?;
    let guided = cfg.guidance_scale != 1.0;
    let mut evals = 0;
    for step in 0..schedule.steps() {
        let rows: Vec<usize> = orders
            .iter()
            .enumerate()
            .flat_map(|(bi, o)| o[step].iter().map(move |&i| bi * n + i))
            .collect();
        let z_for = |cls: &[usize]| -> Result<Tensor<f32>> {
            let mut g = Graph::new();
            let out = model.backbone.forward(
                &mut g,
                store,
                &BackboneInput {
                    x_c: &x_c,
                    mask: &mask,
                    guidance: guidance.as_deref(),
                    classes: cls,
                },
            )?;
            Ok(g.value(out.z).select_rows(&rows))
        };
        let z = z_for(classes)?;
        let z_null = if guided { Some(z_for(&null)?) } else { None };
        let s = model
            .head
            .sample(store, &z, z_null.as_ref(), cfg.guidance_scale, &diff, &model.schedule, rng)?;
        evals = s.head_evaluations;
        for (k, &r) in rows.iter().enumerate() {
            x_c.row_mut(r).copy_from_slice(s.tokens.row(k));
            mask[r] = false;
        }
    }
    let provenance = mask
        .chunks(n)
        .map(|m| {
            m.iter()
                .map(|&masked| if masked { Provenance::DiscreteGen } else { Provenance::Continuous })
                .collect()
        })
        .collect();
    Ok(Chunk {
        tokens: x_c,
        guidance,
        provenance,
        head_evaluations: evals,
    })
}
