//! Learning-rate schedule, gradient clipping and EMA shared by every trainer.

use mixar_autodiff::{ParamGrads, ParamStore, Real};

/// Linear warmup over `warmup_frac` of the run, then cosine decay to zero.
pub fn lr_at(step: usize, total_steps: usize, base: f64, warmup_frac: f64) -> f64 {
    let total = total_steps.max(1) as f64;
    let warmup = (warmup_frac * total).ceil().max(1.0);
    let s = step as f64;
    if s < warmup {
        return base * (s + 1.0) / warmup;
    }
    let progress = ((s - warmup) / (total - warmup).max(1.0)).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut ParamGrads<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().as_f64();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::lit(max_norm / norm));
    }
    norm
}

/// Exponential moving average of parameters with a short warmup:
/// the effective decay is `min(decay, (1 + step) / (10 + step))`.
#[derive(Debug, Clone)]
pub struct Ema<T> {
    pub decay: f64,
    pub params: ParamStore<T>,
    updates: u64,
}

impl<T: Real> Ema<T> {
    pub fn new(source: &ParamStore<T>, decay: f64) -> Self {
        Self {
            decay,
            params: source.clone(),
            updates: 0,
        }
    }

    pub fn effective_decay(&self) -> f64 {
        let s = self.updates as f64;
        self.decay.min((1.0 + s) / (10.0 + s))
    }

    pub fn update(&mut self, source: &ParamStore<T>) {
        let d = self.effective_decay();
        self.params.lerp_from(source, T::lit(d));
        self.updates += 1;
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Restores the update count of a resumed run.
    pub fn set_updates(&mut self, updates: u64) {
        self.updates = updates;
    }
}
