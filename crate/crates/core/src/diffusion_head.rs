//! Per-token denoising head: cosine noise schedule, epsilon-prediction loss,
//! and respaced ancestral sampling with optional classifier-free guidance.

use mixar_autodiff::{Graph, ParamStore, Real, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::nn::Linear;
use crate::rng::{self, Rng};

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub schedule: String,
    pub t_train: usize,
    pub t_sample: usize,
    /// Predicted clean tokens are clipped to `[-clip_x0, clip_x0]` while
    /// sampling; `0` disables clipping.
    pub clip_x0: f64,
    pub temperature: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            schedule: "cosine".into(),
            t_train: 1000,
            t_sample: 100,
            clip_x0: 4.0,
            temperature: 1.0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schedule != "cosine" {
            return Err(config(format!("unsupported noise schedule {:?}", self.schedule)));
        }
        if self.t_train == 0 || self.t_sample == 0 || self.t_sample > self.t_train {
            return Err(config(format!(
                "need 1 <= t_sample <= t_train, got {} and {}",
                self.t_sample, self.t_train
            )));
        }
        Ok(())
    }
}

/// Cumulative signal coefficients `alpha_bar[t]`, `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn cosine(t_train: usize) -> Self {
        let f = |t: usize| {
            let x = (t as f64 / t_train as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let mut alpha_bar = Vec::with_capacity(t_train + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for t in 1..=t_train {
            let beta = (1.0 - f(t) / f(t - 1)).min(MAX_BETA);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self { alpha_bar }
    }

    pub fn from_config(cfg: &DiffusionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::cosine(cfg.t_train))
    }

    pub fn t_train(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `(sqrt(alpha_bar), sqrt(1 - alpha_bar))` at step `t`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let a = self.alpha_bar[t];
        (a.sqrt(), (1.0 - a).sqrt())
    }

    /// `S` evenly spaced training steps ending at `T`, ascending.
    pub fn respaced(&self, steps: usize) -> Vec<usize> {
        let t = self.t_train();
        (1..=steps).map(|i| (i * t).div_ceil(steps)).collect()
    }
}

/// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`, row by row with per-row steps.
pub fn forward_noising<T: Real>(x0: &Tensor<T>, ts: &[usize], eps: &Tensor<T>, schedule: &DiffusionSchedule) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() || ts.len() != x0.rows() {
        return Err(contract("forward_noising shapes disagree"));
    }
    if let Some(&t) = ts.iter().find(|&&t| t > schedule.t_train()) {
        return Err(contract(format!("step {t} beyond schedule length {}", schedule.t_train())));
    }
    let mut out = x0.clone();
    for (r, &t) in ts.iter().enumerate() {
        let (a, s) = schedule.coefficients(t);
        let (a, s) = (T::lit(a), T::lit(s));
        for (o, &e) in out.row_mut(r).iter_mut().zip(eps.row(r)) {
            *o = a * *o + s * e;
        }
    }
    Ok(out)
}

/// Mean over rows of `||eps - eps_hat||^2`.
pub fn epsilon_loss<T: Real>(eps: &Tensor<T>, eps_hat: &Tensor<T>) -> f64 {
    let rows = eps.rows().max(1) as f64;
    eps.data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&a, &b)| (a - b).as_f64().powi(2))
        .sum::<f64>()
        / rows
}

/// Training draws: one step uniform on `[1, T]` and one standard normal
/// vector per row.
pub fn sample_noise<T: Real>(rows: usize, d: usize, schedule: &DiffusionSchedule, rng: &mut Rng) -> (Vec<usize>, Tensor<T>) {
    let ts = (0..rows).map(|_| rng.random_range(1..=schedule.t_train())).collect();
    let eps = Tensor::from_fn(rows, d, |_, _| T::lit(rng::normal(rng)));
    (ts, eps)
}

pub fn timestep_embedding(ts: &[f64], dim: usize) -> Vec<Vec<f64>> {
    let half = dim / 2;
    ts.iter()
        .map(|&t| {
            let mut row = vec![0.0; dim];
            for i in 0..half {
                let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
                row[i] = (t * freq).cos();
                row[half + i] = (t * freq).sin();
            }
            row
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub width: usize,
    pub blocks: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { width: 256, blocks: 3 }
    }
}

#[derive(Debug, Clone)]
struct AdaBlock {
    shift: Linear,
    scale: Linear,
    gate: Linear,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct DenoiserHead {
    pub cfg: HeadConfig,
    pub d_c: usize,
    pub d_b: usize,
    t_fc1: Linear,
    t_fc2: Linear,
    z_proj: Linear,
    x_in: Linear,
    blocks: Vec<AdaBlock>,
    final_shift: Linear,
    final_scale: Linear,
    pub out: Linear,
}

/// `layer_norm(x) * (1 + scale(c)) + shift(c)`
fn modulate<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, c: Var, shift: &Linear, scale: &Linear) -> Var {
    let h = g.layer_norm(x, 1e-6);
    let sc = scale.forward(g, store, c);
    let sc = g.add_scalar(sc, 1.0);
    let sh = shift.forward(g, store, c);
    let h = g.mul(h, sc);
    g.add(h, sh)
}

impl DenoiserHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: HeadConfig, d_c: usize, d_b: usize, seed: u64) -> Result<Self> {
        if cfg.width == 0 || !cfg.width.is_multiple_of(2) {
            return Err(config("head width must be a positive even number"));
        }
        let w = cfg.width;
        let mut rng = rng::stream(seed, "head/init");
        let t_fc1 = Linear::new(store, "head.t_fc1", w, w, &mut rng);
        let t_fc2 = Linear::new(store, "head.t_fc2", w, w, &mut rng);
        let z_proj = Linear::new(store, "head.z_proj", d_b, w, &mut rng);
        let x_in = Linear::new(store, "head.x_in", d_c, w, &mut rng);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let n = |s: &str| format!("head.blocks.{i}.{s}");
                AdaBlock {
                    shift: Linear::new(store, &n("shift"), w, w, &mut rng),
                    scale: Linear::new(store, &n("scale"), w, w, &mut rng),
                    gate: Linear::new(store, &n("gate"), w, w, &mut rng),
                    fc1: Linear::new(store, &n("fc1"), w, w, &mut rng),
                    fc2: Linear::new(store, &n("fc2"), w, w, &mut rng),
                }
            })
            .collect();
        let final_shift = Linear::new(store, "head.final_shift", w, w, &mut rng);
        let final_scale = Linear::new(store, "head.final_scale", w, w, &mut rng);
        let out = Linear::new(store, "head.out", w, d_c, &mut rng);
        Ok(Self {
            cfg,
            d_c,
            d_b,
            t_fc1,
            t_fc2,
            z_proj,
            x_in,
            blocks,
            final_shift,
            final_scale,
            out,
        })
    }

    pub fn num_params(cfg: &HeadConfig, d_c: usize, d_b: usize) -> usize {
        let ww = Linear::num_params(cfg.width, cfg.width);
        2 * ww
            + Linear::num_params(d_b, cfg.width)
            + Linear::num_params(d_c, cfg.width)
            + cfg.blocks * 5 * ww
            + 2 * ww
            + Linear::num_params(cfg.width, d_c)
    }

    /// Predicted noise for `x_t` at steps `ts` given conditioning rows `z`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x_t: Var, ts: &[usize], z: Var) -> Var {
        let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let temb = timestep_embedding(&tf, self.cfg.width);
        let temb = Tensor::from_fn(ts.len(), self.cfg.width, |r, c| T::lit(temb[r][c]));
        let te = g.constant(temb);
        let te = self.t_fc1.forward(g, store, te);
        let te = g.silu(te);
        let te = self.t_fc2.forward(g, store, te);
        let zc = self.z_proj.forward(g, store, z);
        let c = g.add(te, zc);
        let c = g.silu(c);

        let mut x = self.x_in.forward(g, store, x_t);
        for b in &self.blocks {
            let h = modulate(g, store, x, c, &b.shift, &b.scale);
            let h = b.fc1.forward(g, store, h);
            let h = g.silu(h);
            let h = b.fc2.forward(g, store, h);
            let gate = b.gate.forward(g, store, c);
            let h = g.mul(h, gate);
            x = g.add(x, h);
        }
        let h = modulate(g, store, x, c, &self.final_shift, &self.final_scale);
        self.out.forward(g, store, h)
    }

    /// Mean over rows of `||eps - eps_hat(x_t, t, z)||^2`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        x0: &Tensor<T>,
        ts: &[usize],
        eps: &Tensor<T>,
        schedule: &DiffusionSchedule,
    ) -> Result<Var> {
        let xt = forward_noising(x0, ts, eps, schedule)?;
        let xt = g.constant(xt);
        let pred = self.forward(g, store, xt, ts, z);
        Ok(g.sq_err_rows(pred, eps.clone()))
    }

    fn predict<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>, t: usize, z: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let zv = g.constant(z.clone());
        let ts = vec![t; x.rows()];
        let e = self.forward(&mut g, store, xv, &ts, zv);
        g.value(e).clone()
    }

    /// Ancestral sampling over `cfg.t_sample` respaced steps, one token per
    /// row of `z_cond`. With a guidance scale other than 1 the null-class
    /// conditioning `z_null` is evaluated too and the predictions combined as
    /// `null + s (cond - null)`.
    #[allow(clippy::too_many_arguments)]
    pub fn sample<T: Real>(
        &self,
        store: &ParamStore<T>,
        z_cond: &Tensor<T>,
        z_null: Option<&Tensor<T>>,
        guidance_scale: f64,
        cfg: &DiffusionConfig,
        schedule: &DiffusionSchedule,
        rng: &mut Rng,
    ) -> Result<SampleResult<T>> {
        let guided = guidance_scale != 1.0;
        if guided && z_null.map(Tensor::shape) != Some(z_cond.shape()) {
            return Err(contract("guided sampling needs null conditioning of the same shape"));
        }
        let rows = z_cond.rows();
        let mut x: Tensor<T> = Tensor::from_fn(rows, self.d_c, |_, _| T::lit(rng::normal(rng)));
        let steps = schedule.respaced(cfg.t_sample);
        let mut evals = 0;
        for k in (0..steps.len()).rev() {
            let t = steps[k];
            let t_prev = if k == 0 { 0 } else { steps[k - 1] };
            let mut eps = self.predict(store, &x, t, z_cond);
            evals += 1;
            if guided {
                let e_null = self.predict(store, &x, t, z_null.expect("checked"));
                evals += 1;
                let s = T::lit(guidance_scale);
                eps = e_null.zip_map(&eps, |n, c| n + s * (c - n));
            }
            let ab = schedule.alpha_bar(t);
            let ab_prev = schedule.alpha_bar(t_prev);
            let beta = 1.0 - ab / ab_prev;
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
            let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).max(0.0).sqrt() * cfg.temperature;
            for r in 0..rows {
                for c in 0..self.d_c {
                    let xt = x.get(r, c).as_f64();
                    let e = eps.get(r, c).as_f64();
                    let mut x0 = (xt - (1.0 - ab).sqrt() * e) / ab.sqrt();
                    if cfg.clip_x0 > 0.0 {
                        x0 = x0.clamp(-cfg.clip_x0, cfg.clip_x0);
                    }
                    let mut v = c0 * x0 + ct * xt;
                    if t_prev > 0 {
                        v += sigma * rng::normal(rng);
                    }
                    x.set(r, c, T::lit(v));
                }
            }
        }
        Ok(SampleResult { tokens: x, head_evaluations: evals })
    }
}

#[derive(Debug, Clone)]
pub struct SampleResult<T> {
    pub tokens: Tensor<T>,
    /// Head forward passes per token row.
    pub head_evaluations: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head<T: Real>(width: usize, d_c: usize, d_b: usize) -> (ParamStore<T>, DenoiserHead) {
        let mut store = ParamStore::new();
        let h = DenoiserHead::new(&mut store, HeadConfig { width, blocks: 3 }, d_c, d_b, 1).unwrap();
        (store, h)
    }

    #[test]
    fn schedule_invariants() {
        let s = DiffusionSchedule::cosine(1000);
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
            let (a, b) = s.coefficients(t);
            assert!((a * a + b * b - 1.0).abs() < 1e-12);
        }
        assert!(s.alpha_bar(1000) < 1e-4);
        let r = s.respaced(100);
        assert_eq!((r[0], r[99], r.len()), (10, 1000, 100));
    }

    #[test]
    fn noising_limits() {
        let s = DiffusionSchedule::cosine(1000);
        let x0 = Tensor::<f64>::from_vec(1, 3, vec![0.5, -1.0, 2.0]);
        let eps = Tensor::from_vec(1, 3, vec![0.3, 0.1, -0.7]);
        assert_eq!(forward_noising(&x0, &[0], &eps, &s).unwrap(), x0);
        let xt = forward_noising(&x0, &[1000], &eps, &s).unwrap();
        for (a, b) in xt.data().iter().zip(eps.data()) {
            assert!((a - b).abs() < 0.02);
        }
        assert!(forward_noising(&x0, &[1001], &eps, &s).is_err());
    }

    #[test]
    fn noising_preserves_unit_variance() {
        let s = DiffusionSchedule::cosine(1000);
        let mut r = rng::from_seed(3);
        let n = 100_000;
        for t in [1, 250, 500, 900, 1000] {
            let x0 = Tensor::<f64>::from_fn(n, 1, |_, _| rng::normal(&mut r));
            let eps = Tensor::from_fn(n, 1, |_, _| rng::normal(&mut r));
            let xt = forward_noising(&x0, &vec![t; n], &eps, &s).unwrap();
            let mean = xt.sum() / n as f64;
            let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((var - 1.0).abs() < 0.02, "t={t} var {var}");
        }
    }

    #[test]
    fn oracle_and_zero_predictors() {
        let mut r = rng::from_seed(8);
        let s = DiffusionSchedule::cosine(1000);
        let (_, eps) = sample_noise::<f64>(100_000, 8, &s, &mut r);
        assert_eq!(epsilon_loss(&eps, &eps), 0.0);
        let zero = Tensor::zeros(eps.rows(), 8);
        let l = epsilon_loss(&eps, &zero);
        assert!((l / 8.0 - 1.0).abs() < 0.02, "loss {l}");
    }

    #[test]
    fn zeroed_head_output_gives_expected_loss_d_c() {
        let (mut store, h) = head::<f64>(16, 8, 4);
        for id in [h.out.w, h.out.b.unwrap()] {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let s = DiffusionSchedule::cosine(1000);
        let mut r = rng::from_seed(9);
        let rows = 100_000;
        let (ts, eps) = sample_noise::<f64>(rows, 8, &s, &mut r);
        let x0 = Tensor::from_fn(rows, 8, |_, _| rng::normal(&mut r));
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(rows, 4));
        let l = h.loss_graph(&mut g, &store, z, &x0, &ts, &eps, &s).unwrap();
        assert!((g.scalar(l) / 8.0 - 1.0).abs() < 0.02, "loss {}", g.scalar(l));
    }

    #[test]
    fn parameter_count_matches_construction() {
        let (store, _) = head::<f32>(16, 8, 12);
        assert_eq!(store.num_scalars(), DenoiserHead::num_params(&HeadConfig { width: 16, blocks: 3 }, 8, 12));
    }

    #[test]
    fn gradients_match_finite_differences() {
        use mixar_autodiff::gradcheck::check_params;
        let (mut store, h) = head::<f64>(8, 3, 4);
        let s = DiffusionSchedule::cosine(1000);
        let mut r = rng::from_seed(4);
        let (ts, eps) = sample_noise::<f64>(5, 3, &s, &mut r);
        let x0 = Tensor::from_fn(5, 3, |_, _| rng::normal(&mut r));
        let z = Tensor::from_fn(5, 4, |_, _| rng::normal(&mut r));
        let loss_of = |st: &ParamStore<f64>, g: &mut Graph<f64>| {
            let zv = g.constant(z.clone());
            h.loss_graph(g, st, zv, &x0, &ts, &eps, &s).unwrap()
        };
        let mut g = Graph::new();
        let l = loss_of(&store, &mut g);
        let grads = g.backward(l).into_params();
        let report = check_params(&mut store, &grads, 5, 1e-5, |st| {
            let mut g = Graph::new();
            let l = loss_of(st, &mut g);
            g.scalar(l)
        });
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn sampling_determinism_guidance_and_counts() {
        let (store, h) = head::<f64>(16, 4, 6);
        let s = DiffusionSchedule::cosine(1000);
        let cfg = DiffusionConfig { t_sample: 20, ..DiffusionConfig::default() };
        let z = Tensor::from_fn(3, 6, |r, c| (r + c) as f64 * 0.1);
        let zn = Tensor::from_fn(3, 6, |r, c| (r as f64 - c as f64) * 0.05);
        let a = h.sample(&store, &z, None, 1.0, &cfg, &s, &mut rng::from_seed(5)).unwrap();
        let b = h.sample(&store, &z, None, 1.0, &cfg, &s, &mut rng::from_seed(5)).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.head_evaluations, 20);
        let unit = h.sample(&store, &z, Some(&zn), 1.0, &cfg, &s, &mut rng::from_seed(5)).unwrap();
        assert_eq!(unit.tokens, a.tokens);
        let guided = h.sample(&store, &z, Some(&zn), 3.0, &cfg, &s, &mut rng::from_seed(5)).unwrap();
        assert_eq!(guided.head_evaluations, 40);
        assert_ne!(guided.tokens, a.tokens);
        assert!(h.sample(&store, &z, None, 2.0, &cfg, &s, &mut rng::from_seed(5)).is_err());
    }
}
