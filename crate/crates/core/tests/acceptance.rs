//! Acceptance suite. One PASS/FAIL line per criterion, with the measured
//! numbers and the tolerance that was applied.
//!
//! Environment:
//! - `MIXAR_ACCEPT_ONLY=1,2,8` runs a subset.
//! - `MIXAR_ACCEPT_EPOCHS` / `MIXAR_ACCEPT_EXTRA_EPOCHS` override the toy
//!   training budget of criteria 8-10 (defaults 100 and 40).
//! - `MIXAR_ACCEPT_STRICT=1` exits non-zero when any criterion fails.
//! - `MIXAR_ACCEPT_REPORT=path` writes the details as JSON.

use std::collections::BTreeSet;
use std::time::Instant;

use mixar_autodiff::gradcheck::check_params;
use mixar_autodiff::{Graph, ParamStore, Tensor};
use mixar_core::backbone::{Backbone, BackboneConfig, BackboneEmbedders, BackboneInput, GuidanceVariant};
use mixar_core::diffusion_head::{
    epsilon_loss, forward_noising, sample_noise, DenoiserHead, DiffusionConfig, DiffusionSchedule, HeadConfig,
};
use mixar_core::discrete_generator::{DiscreteArModel, DiscreteConfig};
use mixar_core::masking::{build_mask, MaskSpec};
use mixar_core::mixture::{dc_mix, ti_mix, Provenance, TiMixConfig};
use mixar_core::nn::normal_tensor;
use mixar_core::rng;
use mixar_core::tokenizers::{train_tokenizers, TokenizerConfig, Tokenizers};
use mixar_core::toy_data::{generate_dataset, DatasetSpec, ImageBatch, Split};
use mixar_core::training_eval::frechet::{frechet_distance, frechet_surrogate};
use mixar_core::training_eval::*;
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde_json::{json, Value};

type Outcome = Result<(bool, String, Value), String>;
type Criterion = (usize, &'static str, fn() -> Outcome);

fn env_usize(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// --- 1-3: cost accounting ---------------------------------------------------

fn dims(n: usize, n_cls: usize) -> ProfileDims {
    ProfileDims {
        n_tokens: n,
        n_cls,
        ..ProfileDims::default()
    }
}

fn c1_token_accounting() -> Outcome {
    let p = |v| profile_variant(v, &dims(256, 64), None).map_err(err);
    let (sa, ca, mix) = (p(GuidanceVariant::DcSa)?, p(GuidanceVariant::DcCa)?, p(GuidanceVariant::DcMix)?);
    let reduction = 1.0 - mix.tokens.with_cls as f64 / sa.tokens.without_cls as f64;
    // 256 continuous + 256 discrete for the concatenating variants,
    // 256 + 64 class tokens for the mixed sequence
    let pass = sa.tokens.without_cls == 512 && ca.tokens.without_cls == 512 && mix.tokens.with_cls == 320 && reduction == 0.375;
    Ok((
        pass,
        format!(
            "dc-sa {} dc-ca {} dc-mix {} reduction {:.1}% (want 512/512/320, 37.5%, exact)",
            sa.tokens.without_cls,
            ca.tokens.without_cls,
            mix.tokens.with_cls,
            100.0 * reduction
        ),
        json!({"dc_sa": sa.tokens, "dc_ca": ca.tokens, "dc_mix": mix.tokens, "reduction": reduction}),
    ))
}

fn c2_pair_ratio() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    let mut rows = Vec::new();
    for n in [16, 64, 256] {
        let sa = profile_variant(GuidanceVariant::DcSa, &dims(n, 0), None).map_err(err)?;
        let mix = profile_variant(GuidanceVariant::DcMix, &dims(n, 0), None).map_err(err)?;
        // measured from the instrumented forward pass, not the formula
        let (a, b) = (sa.attention_pairs_measured, mix.attention_pairs_measured);
        pass &= a == 4 * b && b == (n * n * mix.dims.layers) as u64;
        parts.push(format!("N={n}: {a}/{b}"));
        rows.push(json!({"n": n, "dc_sa": a, "dc_mix": b}));
    }
    Ok((pass, format!("{} (want ratio 4, exact)", parts.join(", ")), Value::Array(rows)))
}

fn c3_param_ordering() -> Outcome {
    let d = ProfileDims::default();
    let p = |v| profile_variant(v, &d, None).map_err(err);
    let (mix, sa, ca, mar) = (
        p(GuidanceVariant::DcMix)?,
        p(GuidanceVariant::DcSa)?,
        p(GuidanceVariant::DcCa)?,
        p(GuidanceVariant::MarBaseline)?,
    );
    let count = |r: &CostReport| r.backbone_params_measured + r.head_params;
    let (mix, sa, ca, mar) = (count(&mix), count(&sa), count(&ca), count(&mar));
    // codeword projection d_d x d_b plus its bias, minus the mask token
    let expected_mix = mar + d.d_d * d.width + d.width - d.width;
    let pass = ca > sa && sa > mix && mix == expected_mix;
    Ok((
        pass,
        format!("dc-ca {ca} > dc-sa {sa} > dc-mix {mix} = mar {mar} + {} (exact)", mix as i64 - mar as i64),
        json!({"dc_ca": ca, "dc_sa": sa, "dc_mix": mix, "mar": mar}),
    ))
}

// --- 4: mixing ----------------------------------------------------------------

fn c4_mixing() -> Outcome {
    let cases = 10_000;
    let mut r = rng::stream(0, "acceptance/mixing");
    let cfg = BackboneConfig {
        n_tokens: 32,
        n_cls: 2,
        n_classes: 3,
        d_c: 3,
        d_d: 2,
        vocab: 7,
        width: 4,
        layers: 1,
        heads: 2,
        mlp_ratio: 1,
    };
    let mut store = ParamStore::<f64>::new();
    let codebook = normal_tensor::<f64>(cfg.vocab, cfg.d_d, 1.0, &mut r);
    let bb = Backbone::new(&mut store, cfg.clone(), GuidanceVariant::DcMix, Some(codebook.clone()), 0).map_err(err)?;
    let emb = BackboneEmbedders { backbone: &bb, store: &store };
    let get = |name: &str| store.get(store.id(name).expect("parameter exists")).clone();
    let (wc, bc, wd, bd, pos) = (
        get("backbone.cont_proj.weight"),
        get("backbone.cont_proj.bias"),
        get("backbone.disc_proj.weight"),
        get("backbone.disc_proj.bias"),
        get("backbone.pos"),
    );
    // (1 - m) * (x W_c + b_c) + m * (C[g] W_d + b_d) + pos, written out
    let expect = |i: usize, m: f64, x: &[f64], g: usize| -> Vec<f64> {
        (0..cfg.width)
            .map(|o| {
                let c: f64 = bc.get(0, o) + (0..cfg.d_c).map(|k| x[k] * wc.get(k, o)).sum::<f64>();
                let d: f64 = bd.get(0, o) + (0..cfg.d_d).map(|k| codebook.get(g, k) * wd.get(k, o)).sum::<f64>();
                (1.0 - m) * c + m * d + pos.get(i, o)
            })
            .collect()
    };

    let (mut popcount_bad, mut law_err, mut boundary_bad) = (0usize, 0.0f64, 0usize);
    let (mut gt_excess, mut gt_var) = (0.0f64, 0.0f64);
    for case in 0..cases {
        let n = r.random_range(1..=cfg.n_tokens);
        let ratio: f64 = r.random_range(0.0..=1.0);
        let seed: u64 = r.random();
        let lambda: f64 = match case % 4 {
            0 => 0.0,
            1 => 1.0,
            _ => r.random_range(0.0..1.0),
        };
        let mut cr = rng::from_seed(seed);
        let mask = build_mask(n, ratio, &mut cr).map_err(err)?;
        let want = ((ratio * n as f64).ceil() as usize).clamp(1, n);
        // ceil(r N) up to a rounding slack of 1e-9 in r N
        let want_alt = ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
        let got = mask.mask().iter().filter(|&&b| b).count();
        if got != want && got != want_alt {
            popcount_bad += 1;
        }

        let x_d: Vec<usize> = (0..n).map(|_| r.random_range(0..cfg.vocab)).collect();
        let x_hat: Vec<usize> = (0..n)
            .map(|i| if mask.is_masked(i) { r.random_range(0..cfg.vocab) } else { x_d[i] })
            .collect();
        let g = ti_mix(&x_d, &x_hat, &mask, lambda, &mut cr).map_err(err)?;
        let masked = mask.masked_positions();
        if lambda == 1.0 && (g.tokens != x_d || g.generated.iter().any(|&b| b)) {
            boundary_bad += 1;
        }
        if lambda == 0.0 && (g.tokens != x_hat || (0..n).any(|i| g.generated[i] != mask.is_masked(i))) {
            boundary_bad += 1;
        }
        if lambda > 0.0 && lambda < 1.0 {
            let gt = masked.iter().filter(|&&i| !g.generated[i]).count() as f64;
            gt_excess += gt - lambda * masked.len() as f64;
            gt_var += lambda * (1.0 - lambda) * masked.len() as f64;
        }

        // the composition law on the backbone's own embedders
        if case % 10 == 0 {
            let x_c = normal_tensor::<f64>(n, cfg.d_c, 1.0, &mut cr);
            let mixed = dc_mix(&x_c, &g, &mask, &emb).map_err(err)?;
            for i in 0..n {
                let m = if mask.is_masked(i) { 1.0 } else { 0.0 };
                let e = expect(i, m, x_c.row(i), g.tokens[i]);
                for (a, b) in mixed.embeddings.row(i).iter().zip(&e) {
                    law_err = law_err.max((a - b).abs());
                }
                let want = match (mask.is_masked(i), g.generated[i]) {
                    (false, _) => Provenance::Continuous,
                    (true, false) => Provenance::DiscreteGt,
                    (true, true) => Provenance::DiscreteGen,
                };
                if mixed.provenance[i] != want {
                    boundary_bad += 1;
                }
            }
        }
    }
    let z = gt_excess / gt_var.sqrt();
    let pass = popcount_bad == 0 && law_err < 1e-12 && boundary_bad == 0 && z.abs() < 3.0;
    Ok((
        pass,
        format!(
            "{cases} cases: popcount mismatches {popcount_bad}, mixing law max err {law_err:.1e} (tol 1e-12), boundary failures {boundary_bad}, GT fraction z = {z:.2} (|z| < 3)"
        ),
        json!({"cases": cases, "popcount_bad": popcount_bad, "law_err": law_err, "boundary_bad": boundary_bad, "z": z}),
    ))
}

// --- 5: gradients -------------------------------------------------------------

const GRAD_TOL: f64 = 1e-4;

fn c5_gradients() -> Outcome {
    let mut worst: Vec<(String, f64)> = Vec::new();

    let mut gm = DiscreteArModel::<f64>::new(DiscreteConfig {
        vocab: 6,
        n_tokens: 4,
        n_classes: 3,
        n_cls: 2,
        width: 8,
        layers: 2,
        heads: 2,
        mlp_ratio: 2,
        steps: 4,
        ..DiscreteConfig::default()
    })
    .map_err(err)?;
    let targets = [1, 2, 3, 4, 0, 5, 5, 2];
    let masks = vec![
        MaskSpec::from_mask(vec![true, true, false, true], 0.75),
        MaskSpec::from_mask(vec![false, true, true, true], 0.75),
    ];
    let classes = [1, 2];
    let mut g = Graph::new();
    let (loss, _) = gm.loss_graph(&mut g, &targets, &masks, &classes).map_err(err)?;
    let grads = g.backward(loss).into_params();
    let probe = gm.clone();
    let report = check_params(&mut gm.store, &grads, 6, 1e-5, |s| {
        let mut m = probe.clone();
        m.store = s.clone();
        let mut g = Graph::new();
        let (l, _) = m.loss_graph(&mut g, &targets, &masks, &classes).unwrap();
        g.scalar(l)
    });
    worst.push(("discrete generator".into(), report.max_rel_err));

    let cfg = BackboneConfig {
        n_tokens: 4,
        n_cls: 2,
        n_classes: 3,
        d_c: 3,
        d_d: 3,
        vocab: 5,
        width: 8,
        layers: 2,
        heads: 2,
        mlp_ratio: 2,
    };
    let mut r = rng::stream(0, "acceptance/gradients");
    let x = normal_tensor::<f64>(8, cfg.d_c, 1.0, &mut r);
    let mask = vec![true, false, true, true, false, true, true, false];
    let gd = vec![0, 1, 2, 3, 4, 0, 1, 2];
    let classes = [1, cfg.n_classes];
    let target = normal_tensor::<f64>(8, cfg.width, 1.0, &mut r);
    for v in GuidanceVariant::ALL {
        let mut store = ParamStore::<f64>::new();
        let codebook = (v == GuidanceVariant::DcMix).then(|| normal_tensor(cfg.vocab, cfg.d_d, 1.0, &mut r));
        let bb = Backbone::new(&mut store, cfg.clone(), v, codebook, 3).map_err(err)?;
        let loss_of = |s: &ParamStore<f64>, g: &mut Graph<f64>| {
            let inp = BackboneInput {
                x_c: &x,
                mask: &mask,
                guidance: v.uses_guidance().then_some(gd.as_slice()),
                classes: &classes,
            };
            let out = bb.forward(g, s, &inp).unwrap();
            g.mse(out.z, target.clone())
        };
        let mut g = Graph::new();
        let l = loss_of(&store, &mut g);
        let grads = g.backward(l).into_params();
        let report = check_params(&mut store, &grads, 4, 1e-5, |s| {
            let mut g = Graph::new();
            let l = loss_of(s, &mut g);
            g.scalar(l)
        });
        worst.push((format!("backbone {v}"), report.max_rel_err));
    }

    let mut store = ParamStore::<f64>::new();
    let head = DenoiserHead::new(&mut store, HeadConfig { width: 8, blocks: 2 }, 3, 4, 1).map_err(err)?;
    let s = DiffusionSchedule::cosine(1000);
    let (ts, eps) = sample_noise::<f64>(5, 3, &s, &mut r);
    let x0 = normal_tensor::<f64>(5, 3, 1.0, &mut r);
    let z = normal_tensor::<f64>(5, 4, 1.0, &mut r);
    let loss_of = |st: &ParamStore<f64>, g: &mut Graph<f64>| {
        let zv = g.constant(z.clone());
        head.loss_graph(g, st, zv, &x0, &ts, &eps, &s).unwrap()
    };
    let mut g = Graph::new();
    let l = loss_of(&store, &mut g);
    let grads = g.backward(l).into_params();
    let report = check_params(&mut store, &grads, 6, 1e-5, |st| {
        let mut g = Graph::new();
        let l = loss_of(st, &mut g);
        g.scalar(l)
    });
    worst.push(("diffusion head".into(), report.max_rel_err));

    let pass = worst.iter().all(|(_, e)| *e < GRAD_TOL);
    let text = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Ok((
        pass,
        format!("max relative error: {text} (tol {GRAD_TOL:.0e})"),
        json!(worst.iter().map(|(n, e)| json!({"module": n, "max_rel_err": e})).collect::<Vec<_>>()),
    ))
}

// --- 6: diffusion sanity -------------------------------------------------------

fn c6_diffusion() -> Outcome {
    let s = DiffusionSchedule::cosine(1000);
    let mut r = rng::stream(0, "acceptance/diffusion");
    let rows = 20_000;
    let x0 = normal_tensor::<f64>(rows, 4, 1.0, &mut r);
    let mut worst_var = 0.0f64;
    for t in [1, 100, 250, 500, 750, 1000] {
        let eps = normal_tensor::<f64>(rows, 4, 1.0, &mut r);
        let xt = forward_noising(&x0, &vec![t; rows], &eps, &s).map_err(err)?;
        let n = xt.len() as f64;
        let mean = xt.data().iter().sum::<f64>() / n;
        let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        worst_var = worst_var.max((var - 1.0).abs());
    }

    let vocab = 11;
    let mut gm = DiscreteArModel::<f64>::new(DiscreteConfig {
        vocab,
        n_tokens: 4,
        n_classes: 2,
        n_cls: 1,
        width: 8,
        layers: 1,
        heads: 2,
        mlp_ratio: 2,
        steps: 4,
        ..DiscreteConfig::default()
    })
    .map_err(err)?;
    for name in ["head.weight", "head.bias"] {
        let id = gm.store.id(name).ok_or("generator has no output head")?;
        gm.store.get_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let masks = vec![MaskSpec::from_mask(vec![true, false, true, true], 0.75)];
    let (loss, _) = gm.loss_graph(&mut g, &[1, 2, 3, 10], &masks, &[1]).map_err(err)?;
    let ce = g.scalar(loss);
    let ce_err = (ce - (vocab as f64).ln()).abs();

    let d_c = 8;
    let eps = normal_tensor::<f64>(rows, d_c, 1.0, &mut r);
    let zero_loss = epsilon_loss(&eps, &Tensor::zeros(rows, d_c));
    let zero_rel = (zero_loss / d_c as f64 - 1.0).abs();

    let pass = worst_var < 0.02 && ce_err < 1e-12 && zero_rel < 0.02;
    Ok((
        pass,
        format!(
            "noised variance max |var - 1| {worst_var:.4} (tol 0.02); uniform-logit CE {ce:.6} vs ln {vocab} (tol 1e-12); zero-predictor loss {zero_loss:.3} vs d_c {d_c} (tol 2%)"
        ),
        json!({"variance_err": worst_var, "ce": ce, "zero_loss": zero_loss}),
    ))
}

// --- 7: Fréchet oracle ---------------------------------------------------------

fn sym3_eigenvalues(a: &DMatrix<f64>) -> [f64; 3] {
    let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
    let q = a.trace() / 3.0;
    let p2 = (0..3).map(|i| (a[(i, i)] - q).powi(2)).sum::<f64>() + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b = (a - DMatrix::identity(3, 3) * q) / p;
    let phi = (b.determinant() / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

// tr((S1 S2)^1/2) through the eigenvalues of L^T S2 L, S1 = L L^T
fn oracle_frechet(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    let l = s1.clone().cholesky().expect("SPD").l();
    let root: f64 = sym3_eigenvalues(&(l.transpose() * s2 * &l)).iter().map(|e| e.max(0.0).sqrt()).sum();
    (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * root
}

fn c7_frechet() -> Outcome {
    let mut r = rng::stream(0, "acceptance/frechet");
    let mut closed = 0.0f64;
    let m0 = DVector::zeros(4);
    let m1 = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.0]);
    let eye = DMatrix::<f64>::identity(4, 4);
    let d1 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 0.25, 9.0]));
    let d2 = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 1.0, 1.0]));
    // identical, mean shift only, commuting diagonal covariances
    closed = closed.max(frechet_distance(&m1, &d1, &m1, &d1).map_err(err)?.abs());
    closed = closed.max((frechet_distance(&m0, &eye, &m1, &eye).map_err(err)? - 5.25).abs());
    let diag: f64 = [(1.0f64, 4.0f64), (4.0, 1.0), (0.25, 1.0), (9.0, 1.0)]
        .iter()
        .map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2))
        .sum();
    closed = closed.max((frechet_distance(&m1, &d1, &m1, &d2).map_err(err)? - diag).abs());

    let sample = |n: usize, mean: [f64; 3], r: &mut rng::Rng| Tensor::from_fn(n, 3, |_, c| mean[c] + rng::normal(r));
    let a = sample(20_000, [0.0; 3], &mut r);
    let b = sample(20_000, [0.0, 1.0, 0.0], &mut r);
    let sampled = frechet_surrogate(&a, &b).map_err(err)?;

    let mut oracle_err = 0.0f64;
    for _ in 0..100 {
        let mut spd = || {
            let a = DMatrix::from_fn(3, 3, |_, _| rng::normal(&mut r));
            &a * a.transpose() + DMatrix::identity(3, 3) * 0.1
        };
        let (s1, s2) = (spd(), spd());
        let ma = DVector::from_fn(3, |_, _| rng::normal(&mut r));
        let mb = DVector::from_fn(3, |_, _| rng::normal(&mut r));
        let ours = frechet_distance(&ma, &s1, &mb, &s2).map_err(err)?;
        oracle_err = oracle_err.max((ours - oracle_frechet(&ma, &s1, &mb, &s2)).abs());
    }
    let pass = closed < 1e-6 && (sampled - 1.0).abs() < 0.05 && oracle_err < 1e-8;
    Ok((
        pass,
        format!(
            "closed forms max err {closed:.1e} (tol 1e-6); sampled unit shift {sampled:.4} (1 +- 0.05); oracle agreement {oracle_err:.1e} over 100 3x3 SPD (tol 1e-8)"
        ),
        json!({"closed_err": closed, "sampled": sampled, "oracle_err": oracle_err}),
    ))
}

// --- 8-10: toy training ----------------------------------------------------------

const SEEDS: [u64; 3] = [0, 1, 2];
const PER_CLASS_FRECHET: usize = 64;
const GAP_BATCHES: usize = 8;
// Fréchet values are sampled; "no worse" allows this relative slack
const FRECHET_SLACK: f64 = 0.05;

struct Pipeline {
    tok: Tokenizers,
    gm: DiscreteArModel,
    evaluator: Evaluator,
    train: TokenizedSet,
    val: TokenizedSet,
    probe_val_accuracy: f64,
    epochs: usize,
    extra: usize,
}

impl Pipeline {
    fn build() -> Result<Self, String> {
        let t = Instant::now();
        let ds = generate_dataset(&DatasetSpec::default()).map_err(err)?;
        let split = |s| ds.images.select(&ds.indices(s));
        let (train_img, val_img): (ImageBatch, ImageBatch) = (split(Split::Train), split(Split::Val));
        let tok = train_tokenizers(&train_img, &TokenizerConfig::default()).map_err(err)?;
        let mut probe = Probe::new(ProbeConfig::default(), train_img.pixels_per_image(), ds.spec.n_classes).map_err(err)?;
        probe.train(&train_img).map_err(err)?;
        let probe_val_accuracy = probe.accuracy(&val_img).map_err(err)?;
        let tokens = tok.vq.tokenize(&train_img).map_err(err)?;
        let mut gm = DiscreteArModel::new(DiscreteConfig {
            vocab: tok.vq.cfg.codebook_size,
            n_tokens: tok.vq.cfg.n_tokens(),
            n_classes: ds.spec.n_classes,
            width: 64,
            ..DiscreteConfig::default()
        })
        .map_err(err)?;
        gm.train(&tokens.indices, &train_img.labels).map_err(err)?;
        // 512 real images, 64 per class, against 512 generated
        let reference: Vec<usize> = (0..ds.spec.n_classes)
            .flat_map(|c| {
                let labels = &train_img.labels;
                (0..labels.len()).filter(move |&i| labels[i] == c).take(PER_CLASS_FRECHET)
            })
            .collect();
        let evaluator = Evaluator::new(probe, &train_img.select(&reference)).map_err(err)?;
        let train = TokenizedSet::from_images(&train_img, &tok).map_err(err)?;
        let val = TokenizedSet::from_images(&val_img, &tok).map_err(err)?;
        eprintln!("setup: tokenizers, probe and generator trained in {:.0} s", t.elapsed().as_secs_f64());
        Ok(Self {
            tok,
            gm,
            evaluator,
            train,
            val,
            probe_val_accuracy,
            epochs: env_usize("MIXAR_ACCEPT_EPOCHS", 100),
            extra: env_usize("MIXAR_ACCEPT_EXTRA_EPOCHS", 40),
        })
    }

    fn train_cfg(&self, variant: GuidanceVariant, seed: u64) -> TrainConfig {
        TrainConfig {
            variant,
            epochs: self.epochs,
            batch_size: 32,
            class_dropout: 0.0,
            eval_every: self.epochs,
            ti_mix: TiMixConfig::disabled(),
            backbone: BackboneConfig {
                n_tokens: self.tok.continuous.cfg.n_tokens(),
                d_c: self.tok.continuous.cfg.d_c,
                d_d: self.tok.vq.cfg.d_d,
                vocab: self.tok.vq.cfg.codebook_size,
                width: 64,
                layers: 4,
                ..BackboneConfig::default()
            },
            head: HeadConfig { width: 64, blocks: 3 },
            diffusion: DiffusionConfig {
                t_sample: 50,
                ..DiffusionConfig::default()
            },
            seeds: Seeds::from_base(seed),
            ..TrainConfig::default()
        }
    }

    fn gen_cfg(&self, seed: u64) -> GenerateConfig {
        GenerateConfig {
            t_sample: 50,
            seed,
            ..GenerateConfig::default()
        }
    }

    fn train(&self, model: &mut MixarModel) -> Result<(), String> {
        let t = Instant::now();
        train_mixar(model, &self.train, &self.val, Some(&self.gm), |_, _| Ok(())).map_err(err)?;
        eprintln!(
            "  {} seed {} to epoch {} in {:.0} s (generator calls {})",
            model.cfg.variant,
            model.cfg.seeds.init,
            model.epochs_done,
            t.elapsed().as_secs_f64(),
            model.generator_calls
        );
        Ok(())
    }

    fn frechet(&self, model: &MixarModel, seed: u64) -> Result<(f64, f64), String> {
        let gm = model.cfg.variant.uses_guidance().then_some(&self.gm);
        let (_, s) = self
            .evaluator
            .sample_and_score(gm, model, &self.tok, PER_CLASS_FRECHET, &self.gen_cfg(seed))
            .map_err(err)?;
        Ok((s.frechet, s.probe_accuracy))
    }
}

fn c8_table(p: &Pipeline, mix_models: &mut Vec<MixarModel>) -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    let mut rows = Vec::new();
    for &seed in &SEEDS {
        let score = |variant| -> Result<(MixarModel, f64, f64), String> {
            let cfg = p.train_cfg(variant, seed);
            let codebook = (variant == GuidanceVariant::DcMix).then(|| p.tok.vq.codebook().codewords.clone());
            let mut m = MixarModel::new(cfg, codebook).map_err(err)?;
            p.train(&mut m)?;
            let plan = ValidationPlan::with_batches(&m, &p.val, GAP_BATCHES).map_err(err)?;
            let loss = plan.loss(&m, GuidanceSource::GroundTruth).map_err(err)?;
            let (fr, _) = p.frechet(&m, seed)?;
            Ok((m, loss, fr))
        };
        let (_, mar_loss, mar_fr) = score(GuidanceVariant::MarBaseline)?;
        let (mix, mix_loss, mix_fr) = score(GuidanceVariant::DcMix)?;
        let win = mix_loss < mar_loss && mix_fr < mar_fr;
        wins += win as usize;
        lines.push(format!(
            "seed {seed}: loss {mix_loss:.4} vs {mar_loss:.4}, frechet {mix_fr:.3} vs {mar_fr:.3}"
        ));
        rows.push(json!({"seed": seed, "dc_mix": {"val_loss": mix_loss, "frechet": mix_fr}, "mar": {"val_loss": mar_loss, "frechet": mar_fr}}));
        mix_models.push(mix);
    }
    Ok((
        wins == SEEDS.len(),
        format!(
            "dc-mix vs mar after {} epochs, {wins}/3 seeds better on both ({}); strict inequality",
            p.epochs,
            lines.join("; ")
        ),
        Value::Array(rows),
    ))
}

fn c9_ti_mix(p: &Pipeline, base: &[MixarModel], finals: &mut Vec<MixarModel>) -> Outcome {
    let total = p.epochs + p.extra;
    let mut wins = 0;
    let mut lines = Vec::new();
    let mut rows = Vec::new();
    for m in base {
        let seed = m.cfg.seeds.init;
        let run = |ti_mix: TiMixConfig| -> Result<(MixarModel, f64, f64), String> {
            let mut c = m.clone();
            c.cfg.epochs = total;
            c.cfg.eval_every = total;
            c.cfg.ti_mix = ti_mix;
            p.train(&mut c)?;
            let (gt, gen) = train_eval_gap(&c, &p.val, &p.gm, GAP_BATCHES).map_err(err)?;
            let (fr, _) = p.frechet(&c, seed)?;
            Ok((c, gen - gt, fr))
        };
        let (ti, ti_gap, ti_fr) = run(TiMixConfig {
            lambda_start: 1.0,
            lambda_end: 0.0,
            start_epoch: m.epochs_done,
            ..TiMixConfig::default()
        })?;
        let (_, base_gap, base_fr) = run(TiMixConfig::disabled())?;
        let win = ti_gap < base_gap && ti_fr <= base_fr * (1.0 + FRECHET_SLACK);
        wins += win as usize;
        lines.push(format!(
            "seed {seed}: gap {ti_gap:.4} vs {base_gap:.4}, frechet {ti_fr:.3} vs {base_fr:.3}"
        ));
        rows.push(json!({"seed": seed, "ti_mix": {"gap": ti_gap, "frechet": ti_fr}, "lambda_one": {"gap": base_gap, "frechet": base_fr}}));
        finals.push(ti);
    }
    Ok((
        wins == base.len() && !base.is_empty(),
        format!(
            "continued {} epochs, {wins}/3 seeds with smaller gap and frechet within {:.0}% ({})",
            p.extra,
            FRECHET_SLACK * 100.0,
            lines.join("; ")
        ),
        Value::Array(rows),
    ))
}

fn c10_end_to_end(p: &Pipeline, model: &MixarModel) -> Outcome {
    let per_class = 256;
    let classes = balanced_classes(model.cfg.backbone.n_classes, per_class);
    let out = generate_images(Some(&p.gm), model, &p.tok, &classes, &p.gen_cfg(0)).map_err(err)?;
    let n = model.cfg.backbone.n_tokens;
    let covered = out.provenance.len() == classes.len()
        && out.provenance.iter().all(|row| row.len() == n && row.iter().all(|&v| v == Provenance::Continuous))
        && out.images.len() == classes.len()
        && out.images.pixels.iter().all(|v| v.is_finite());
    let acc = p.evaluator.probe.accuracy(&out.images).map_err(err)?;
    let few = balanced_classes(model.cfg.backbone.n_classes, 4);
    let a = generate_images(Some(&p.gm), model, &p.tok, &few, &p.gen_cfg(7)).map_err(err)?;
    let b = generate_images(Some(&p.gm), model, &p.tok, &few, &p.gen_cfg(7)).map_err(err)?;
    let deterministic = a.images.pixels == b.images.pixels && a.guidance == b.guidance;
    let pass = covered && deterministic && acc >= 0.70;
    Ok((
        pass,
        format!(
            "{} samples: probe accuracy {:.3} (>= 0.70; probe on real val {:.3}), provenance covered {covered}, deterministic {deterministic}",
            classes.len(),
            acc,
            p.probe_val_accuracy
        ),
        json!({"samples": classes.len(), "probe_accuracy": acc, "covered": covered, "deterministic": deterministic}),
    ))
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; none apply here
    let only: Option<BTreeSet<usize>> = std::env::var("MIXAR_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().is_none_or(|s| s.contains(&k));
    let mut results: Vec<(usize, &str, bool, f64)> = Vec::new();
    let mut report = serde_json::Map::new();
    let mut record = |k: usize, name: &'static str, t: Instant, out: Outcome| {
        let secs = t.elapsed().as_secs_f64();
        let (pass, text, details) = match out {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}"), Value::Null),
        };
        println!("{} [{k}] {name}: {text} ({secs:.1} s)", if pass { "PASS" } else { "FAIL" });
        report.insert(k.to_string(), json!({"name": name, "pass": pass, "seconds": secs, "details": details}));
        results.push((k, name, pass, secs));
    };

    let fast: [Criterion; 7] = [
        (1, "token accounting", c1_token_accounting),
        (2, "attention pair ratio", c2_pair_ratio),
        (3, "parameter ordering", c3_param_ordering),
        (4, "mixing correctness", c4_mixing),
        (5, "gradient correctness", c5_gradients),
        (6, "diffusion sanity", c6_diffusion),
        (7, "frechet oracle", c7_frechet),
    ];
    for (k, name, f) in fast {
        if wanted(k) {
            let t = Instant::now();
            record(k, name, t, f());
        }
    }

    if wanted(8) || wanted(9) || wanted(10) {
        match Pipeline::build() {
            Err(e) => {
                for (k, name) in [(8, "dc-mix vs mar"), (9, "ti-mix continuation"), (10, "end-to-end sampling")] {
                    if wanted(k) {
                        record(k, name, Instant::now(), Err(format!("setup failed: {e}")));
                    }
                }
            }
            Ok(p) => {
                let t = Instant::now();
                let mut mix = Vec::new();
                let out = c8_table(&p, &mut mix);
                if wanted(8) {
                    record(8, "dc-mix vs mar", t, out);
                }
                let mut finals = Vec::new();
                if wanted(9) || wanted(10) {
                    let t = Instant::now();
                    let out = c9_ti_mix(&p, &mix, &mut finals);
                    if wanted(9) {
                        record(9, "ti-mix continuation", t, out);
                    }
                }
                if wanted(10) {
                    let t = Instant::now();
                    let out = match finals.first() {
                        Some(m) => c10_end_to_end(&p, m),
                        None => Err("no trained model".into()),
                    };
                    record(10, "end-to-end sampling", t, out);
                }
            }
        }
    }

    let failed: Vec<_> = results.iter().filter(|r| !r.2).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") }
    );
    if let Ok(path) = std::env::var("MIXAR_ACCEPT_REPORT") {
        let text = serde_json::to_string_pretty(&Value::Object(report)).expect("report serializes");
        if let Err(e) = std::fs::write(&path, text) {
            eprintln!("could not write {path}: {e}");
        }
    }
    if !failed.is_empty() && std::env::var("MIXAR_ACCEPT_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
