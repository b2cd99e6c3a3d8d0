//! Guidance mixing. `dc_mix` swaps masked continuous tokens for discrete
//! guidance embeddings; `ti_mix` blends ground-truth and generated guidance
//! at a ratio `lambda` that decays during training.

use mixar_autodiff::{Real, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::masking::MaskSpec;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Continuous,
    DiscreteGt,
    DiscreteGen,
}

/// Guidance tokens for one or more sequences and, per position, whether the
/// token came from the generator rather than the ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Guidance {
    pub tokens: Vec<usize>,
    pub generated: Vec<bool>,
}

impl Guidance {
    pub fn ground_truth(tokens: Vec<usize>) -> Self {
        let generated = vec![false; tokens.len()];
        Self { tokens, generated }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSequence<T> {
    pub embeddings: Tensor<T>,
    pub provenance: Vec<Provenance>,
    pub mask: MaskSpec,
}

/// Maps continuous tokens and discrete indices at a grid position to
/// backbone-width embeddings.
pub trait Embedders<T: Real> {
    fn width(&self) -> usize;
    fn embed_continuous(&self, position: usize, token: &[T]) -> Vec<T>;
    fn embed_discrete(&self, position: usize, index: usize) -> Result<Vec<T>>;
}

/// Row `i` of the mixed sequence reads row `i` of the continuous embeddings
/// when unmasked and row `n_rows + i` (the discrete embeddings stacked after
/// them) when masked.
pub fn mix_rows(mask: &[bool]) -> Vec<usize> {
    let n = mask.len();
    mask.iter()
        .enumerate()
        .map(|(i, &m)| if m { n + i } else { i })
        .collect()
}

pub fn dc_mix<T: Real, E: Embedders<T>>(
    x_c: &Tensor<T>,
    guidance: &Guidance,
    mask: &MaskSpec,
    embedders: &E,
) -> Result<MixedSequence<T>> {
    let n = mask.len();
    if x_c.rows() != n || guidance.len() != n {
        return Err(contract(format!(
            "dc_mix lengths differ: continuous {}, discrete {}, mask {n}",
            x_c.rows(),
            guidance.len()
        )));
    }
    let mut embeddings = Tensor::zeros(n, embedders.width());
    let mut provenance = Vec::with_capacity(n);
    for i in 0..n {
        let (row, p) = if mask.is_masked(i) {
            let p = if guidance.generated[i] {
                Provenance::DiscreteGen
            } else {
                Provenance::DiscreteGt
            };
            (embedders.embed_discrete(i, guidance.tokens[i])?, p)
        } else {
            (embedders.embed_continuous(i, x_c.row(i)), Provenance::Continuous)
        };
        embeddings.row_mut(i).copy_from_slice(&row);
        provenance.push(p);
    }
    Ok(MixedSequence {
        embeddings,
        provenance,
        mask: mask.clone(),
    })
}

/// Per masked position: the ground-truth token when `rho < lambda`, the
/// generated one otherwise. Unmasked positions always keep the ground truth.
pub fn ti_mix(x_d: &[usize], x_hat: &[usize], mask: &MaskSpec, lambda: f64, rng: &mut Rng) -> Result<Guidance> {
    if x_d.len() != mask.len() || x_hat.len() != mask.len() {
        return Err(contract(format!(
            "ti_mix lengths differ: truth {}, generated {}, mask {}",
            x_d.len(),
            x_hat.len(),
            mask.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(contract(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut tokens = Vec::with_capacity(x_d.len());
    let mut generated = Vec::with_capacity(x_d.len());
    for i in 0..x_d.len() {
        if !mask.is_masked(i) {
            if x_hat[i] != x_d[i] {
                return Err(contract(format!(
                    "generated sequence differs from ground truth at unmasked position {i}"
                )));
            }
            tokens.push(x_d[i]);
            generated.push(false);
            continue;
        }
        let rho: f64 = rng.random();
        if rho < lambda {
            tokens.push(x_d[i]);
            generated.push(false);
        } else {
            tokens.push(x_hat[i]);
            generated.push(true);
        }
    }
    Ok(Guidance { tokens, generated })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TiMixConfig {
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub decay: Decay,
    pub start_epoch: usize,
}

impl Default for TiMixConfig {
    fn default() -> Self {
        Self {
            lambda_start: 1.0,
            lambda_end: 0.0,
            decay: Decay::Linear,
            start_epoch: 0,
        }
    }
}

impl TiMixConfig {
    /// Guidance stays ground truth throughout.
    pub fn disabled() -> Self {
        Self {
            lambda_start: 1.0,
            lambda_end: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lambda_end && self.lambda_end <= self.lambda_start && self.lambda_start <= 1.0) {
            return Err(config(format!(
                "need 0 <= lambda_end <= lambda_start <= 1, got start {} end {}",
                self.lambda_start, self.lambda_end
            )));
        }
        Ok(())
    }

    /// True when some epoch uses generated guidance.
    pub fn needs_generator(&self) -> bool {
        self.lambda_end < 1.0
    }
}

/// Ground-truth ratio for `epoch`: `lambda_start` until `start_epoch`, then a
/// monotone decay reaching `lambda_end` at `total_epochs`. A start epoch at or
/// past the end keeps `lambda_start` throughout.
pub fn lambda_schedule(epoch: usize, total_epochs: usize, cfg: &TiMixConfig) -> f64 {
    if epoch <= cfg.start_epoch || total_epochs <= cfg.start_epoch {
        return cfg.lambda_start;
    }
    let p = ((epoch - cfg.start_epoch) as f64 / (total_epochs - cfg.start_epoch) as f64).min(1.0);
    let span = cfg.lambda_start - cfg.lambda_end;
    match cfg.decay {
        Decay::Linear => cfg.lambda_start - span * p,
        Decay::Cosine => cfg.lambda_end + span * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()),
    }
}
