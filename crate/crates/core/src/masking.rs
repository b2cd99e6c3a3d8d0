//! Mask ratios, binary masks over the token grid, and the unmasking schedule
//! used by iterative decoding.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::rng::Rng;

/// Bounds of the uniform mask-ratio distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatioConfig {
    pub r_min: f64,
    pub r_max: f64,
}

impl Default for RatioConfig {
    fn default() -> Self {
        Self {
            r_min: 0.7,
            r_max: 1.0,
        }
    }
}

impl RatioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_min > 0.0 && self.r_min <= self.r_max && self.r_max <= 1.0) {
            return Err(config(format!(
                "mask ratio bounds must satisfy 0 < r_min <= r_max <= 1, got [{}, {}]",
                self.r_min, self.r_max
            )));
        }
        Ok(())
    }
}

pub fn sample_mask_ratio(rng: &mut Rng, cfg: &RatioConfig) -> Result<f64> {
    cfg.validate()?;
    if cfg.r_min == cfg.r_max {
        return Ok(cfg.r_min);
    }
    Ok(rng.random_range(cfg.r_min..=cfg.r_max))
}

/// `ceil(r * n)` clamped to `[1, n]`. The small offset keeps products such as
/// `0.7 * 20 = 14.000000000000002` from rounding up.
pub fn mask_count(n: usize, r: f64) -> usize {
    ((r * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    mask: Vec<bool>,
    ratio: f64,
    masked_positions: Vec<usize>,
}

impl MaskSpec {
    pub fn from_mask(mask: Vec<bool>, ratio: f64) -> Self {
        let masked_positions = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
            .collect();
        Self {
            mask,
            ratio,
            masked_positions,
        }
    }

    pub fn all(n: usize) -> Self {
        Self::from_mask(vec![true; n], 1.0)
    }

    pub fn none(n: usize) -> Self {
        Self::from_mask(vec![false; n], 0.0)
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    /// Masked indices in ascending order.
    pub fn masked_positions(&self) -> &[usize] {
        &self.masked_positions
    }

    pub fn count(&self) -> usize {
        self.masked_positions.len()
    }

    #[inline]
    pub fn is_masked(&self, i: usize) -> bool {
        self.mask[i]
    }
}

/// Chooses exactly `ceil(r n)` positions uniformly without replacement.
pub fn build_mask(n: usize, r: f64, rng: &mut Rng) -> Result<MaskSpec> {
    if n == 0 {
        return Err(contract("mask length must be at least 1"));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(contract(format!("mask ratio {r} outside (0, 1]")));
    }
    let k = mask_count(n, r);
    let mut mask = vec![false; n];
    for i in index::sample(rng, n, k) {
        mask[i] = true;
    }
    Ok(MaskSpec::from_mask(mask, r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleShape {
    Cosine,
    Linear,
}

impl std::str::FromStr for ScheduleShape {
    type Err = crate::MixarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            _ => Err(config(format!("unknown schedule shape {s:?}"))),
        }
    }
}

/// Number of positions committed at each decode step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeSchedule {
    counts: Vec<usize>,
}

impl DecodeSchedule {
    pub fn steps(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Positions still masked after step `t` follow `n cos(pi/2 t/T)` (or
/// `n (1 - t/T)`), floored and clamped so every step commits at least one.
pub fn build_decode_schedule(n_masked: usize, steps: usize, shape: ScheduleShape) -> Result<DecodeSchedule> {
    if steps == 0 || steps > n_masked {
        return Err(contract(format!(
            "decode steps must be in [1, {n_masked}], got {steps}"
        )));
    }
    let n = n_masked as f64;
    let mut counts = Vec::with_capacity(steps);
    let mut prev = n_masked;
    for t in 1..=steps {
        let frac = t as f64 / steps as f64;
        let raw = match shape {
            ScheduleShape::Cosine => n * (std::f64::consts::FRAC_PI_2 * frac).cos(),
            ScheduleShape::Linear => n * (1.0 - frac),
        };
        let raw = if t == steps { 0 } else { (raw + 1e-9).floor().max(0.0) as usize };
        let remaining = raw.max(steps - t).min(prev - 1);
        counts.push(prev - remaining);
        prev = remaining;
    }
    Ok(DecodeSchedule { counts })
}

/// Splits `masked` into per-step groups following `schedule`, picking each
/// group uniformly among the positions still masked. Groups are returned in
/// ascending position order. A step that commits everything left draws no
/// randomness.
pub fn decode_order(masked: &[usize], schedule: &DecodeSchedule, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if schedule.total() != masked.len() {
        return Err(contract(format!(
            "schedule covers {} positions but {} are masked",
            schedule.total(),
            masked.len()
        )));
    }
    let mut remaining: Vec<usize> = masked.to_vec();
    remaining.sort_unstable();
    let mut groups = Vec::with_capacity(schedule.steps());
    for &c in schedule.counts() {
        if c == remaining.len() {
            groups.push(std::mem::take(&mut remaining));
            continue;
        }
        let mut picks: Vec<usize> = index::sample(rng, remaining.len(), c).into_vec();
        picks.sort_unstable();
        let mut group = Vec::with_capacity(c);
        for &p in picks.iter().rev() {
            group.push(remaining.remove(p));
        }
        group.reverse();
        groups.push(group);
    }
    Ok(groups)
}
