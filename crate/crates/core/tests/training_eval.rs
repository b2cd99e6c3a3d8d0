use mixar_autodiff::{Graph, Tensor};
use mixar_core::backbone::{BackboneConfig, GuidanceVariant};
use mixar_core::diffusion_head::{DiffusionConfig, HeadConfig};
use mixar_core::discrete_generator::{DiscreteArModel, DiscreteConfig};
use mixar_core::masking::MaskSpec;
use mixar_core::mixture::{Provenance, TiMixConfig};
use mixar_core::rng;
use mixar_core::tokenizers::{ContinuousTokenizer, TokenizerConfig, Tokenizers, VqTokenizer};
use mixar_core::toy_data::{generate_dataset, DatasetSpec, Split};
use mixar_core::training_eval::*;
use mixar_core::MixarError;
use nalgebra::{DMatrix, DVector};

fn tok_cfg() -> TokenizerConfig {
    TokenizerConfig {
        image_size: 8,
        patch: 4,
        d_c: 4,
        d_d: 4,
        codebook_size: 8,
        hidden: 16,
        ..TokenizerConfig::default()
    }
}

fn tiny_setup() -> (Tokenizers, TokenizedSet, TokenizedSet) {
    let ds = generate_dataset(&DatasetSpec {
        n_classes: 3,
        images_per_class: 12,
        image_size: 8,
        seed: 5,
    })
    .unwrap();
    let tok = Tokenizers {
        continuous: ContinuousTokenizer::new(tok_cfg()).unwrap(),
        vq: VqTokenizer::new(tok_cfg()).unwrap(),
    };
    let all: Vec<usize> = (0..ds.images.len()).collect();
    let train = TokenizedSet::from_images(&ds.images.select(&all[..30]), &tok).unwrap();
    let val = TokenizedSet::from_images(&ds.images.select(&all[30..]), &tok).unwrap();
    (tok, train, val)
}

fn tiny_train_cfg(variant: GuidanceVariant) -> TrainConfig {
    TrainConfig {
        variant,
        epochs: 2,
        batch_size: 8,
        eval_every: 1,
        eval_batches: 2,
        ti_mix: TiMixConfig::disabled(),
        backbone: BackboneConfig {
            n_tokens: 4,
            n_cls: 2,
            n_classes: 3,
            d_c: 4,
            d_d: 4,
            vocab: 8,
            width: 16,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
        },
        head: HeadConfig { width: 16, blocks: 2 },
        diffusion: DiffusionConfig {
            t_train: 100,
            t_sample: 10,
            ..DiffusionConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn tiny_generator() -> DiscreteArModel {
    DiscreteArModel::new(DiscreteConfig {
        vocab: 8,
        n_tokens: 4,
        n_classes: 3,
        n_cls: 2,
        width: 16,
        layers: 1,
        heads: 2,
        mlp_ratio: 2,
        steps: 2,
        ..DiscreteConfig::default()
    })
    .unwrap()
}

fn model(variant: GuidanceVariant, tok: &Tokenizers) -> MixarModel {
    MixarModel::new(tiny_train_cfg(variant), Some(tok.vq.codebook().codewords.clone())).unwrap()
}

#[test]
fn parameter_count_matches_formula() {
    let (tok, _, _) = tiny_setup();
    for v in GuidanceVariant::ALL {
        let m = model(v, &tok);
        assert_eq!(m.num_params(), MixarModel::expected_params(&m.cfg), "{v}");
    }
}

#[test]
fn constant_lambda_never_invokes_generator() {
    let (tok, train, val) = tiny_setup();
    let mut m = model(GuidanceVariant::DcMix, &tok);
    train_mixar(&mut m, &train, &val, None, |_, _| Ok(())).unwrap();
    assert_eq!(m.generator_calls, 0);
    assert_eq!(m.epochs_done, 2);
    assert_eq!(m.metrics.len(), 2);
    assert!(m.metrics.iter().all(|r| r.val_loss_gt.is_finite()));
}

#[test]
fn decaying_lambda_needs_generator() {
    let (tok, train, val) = tiny_setup();
    let mut cfg = tiny_train_cfg(GuidanceVariant::DcMix);
    cfg.ti_mix = TiMixConfig::default();
    let mut m = MixarModel::new(cfg.clone(), Some(tok.vq.codebook().codewords.clone())).unwrap();
    let err = train_mixar(&mut m, &train, &val, None, |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, MixarError::Config(_)), "{err}");

    let gm = tiny_generator();
    let mut m = MixarModel::new(cfg, Some(tok.vq.codebook().codewords.clone())).unwrap();
    train_mixar(&mut m, &train, &val, Some(&gm), |_, _| Ok(())).unwrap();
    // epoch 0 runs at lambda_start = 1; epoch 1 blends, once per batch
    assert_eq!(m.generator_calls, 30u64.div_ceil(8));
    assert!(m.metrics.iter().all(|r| r.val_loss_gen.is_some()));
}

#[test]
fn baseline_ignores_ti_mix_and_generator() {
    let (_, train, val) = tiny_setup();
    let mut cfg = tiny_train_cfg(GuidanceVariant::MarBaseline);
    cfg.ti_mix = TiMixConfig::default();
    let mut m = MixarModel::new(cfg, None).unwrap();
    train_mixar(&mut m, &train, &val, None, |_, _| Ok(())).unwrap();
    assert_eq!(m.generator_calls, 0);
}

#[test]
fn loss_ignores_unmasked_positions() {
    let (tok, train, _) = tiny_setup();
    for v in GuidanceVariant::ALL {
        let m = model(v, &tok);
        let items = [0, 1, 2];
        let masks = vec![
            MaskSpec::from_mask(vec![true, false, false, true], 0.5),
            MaskSpec::from_mask(vec![false, true, false, false], 0.25),
            MaskSpec::all(4),
        ];
        let inputs = StepInputs {
            x_c: train.continuous(&items),
            masks,
            guidance: v.uses_guidance().then(|| train.discrete(&items)),
            classes: train.classes(&items),
        };
        let noise = m.draw_noise(&inputs, &mut rng::from_seed(3));
        let mut g = Graph::new();
        let (loss, z) = m.loss_graph(&mut g, &m.store, &inputs, &noise).unwrap();
        let grads = g.backward(loss);
        let gz = grads.wrt(z).expect("z gradient");
        let mask = inputs.flat_mask();
        for (r, &masked) in mask.iter().enumerate() {
            let norm: f32 = gz.row(r).iter().map(|x| x * x).sum();
            if masked {
                assert!(norm > 0.0, "{v}: masked row {r} has no gradient");
            } else {
                assert_eq!(norm, 0.0, "{v}: unmasked row {r} contributes");
            }
        }
    }
}

#[test]
fn training_is_reproducible() {
    let (_, train, val) = tiny_setup();
    let gm = tiny_generator();
    let run = || {
        let mut cfg = tiny_train_cfg(GuidanceVariant::DcSa);
        cfg.ti_mix = TiMixConfig::default();
        let mut m = MixarModel::new(cfg, None).unwrap();
        train_mixar(&mut m, &train, &val, Some(&gm), |_, _| Ok(())).unwrap();
        m
    };
    let (a, b) = (run(), run());
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.train_loss, b.train_loss);
}

#[test]
fn identical_guidance_gives_identical_losses() {
    let (tok, _, val) = tiny_setup();
    let gm = tiny_generator();
    let m = model(GuidanceVariant::MarBaseline, &tok);
    let (gt, gen) = train_eval_gap(&m, &val, &gm, 2).unwrap();
    assert_eq!(gt, gen);
    let m = model(GuidanceVariant::DcMix, &tok);
    let plan = ValidationPlan::with_batches(&m, &val, 2).unwrap();
    assert_eq!(
        plan.loss(&m, GuidanceSource::GroundTruth).unwrap(),
        plan.loss(&m, GuidanceSource::GroundTruth).unwrap()
    );
    let (gt2, gen2) = train_eval_gap(&m, &val, &gm, 2).unwrap();
    assert_eq!(train_eval_gap(&m, &val, &gm, 2).unwrap(), (gt2, gen2));
}

#[test]
fn checkpoint_round_trip_and_continuation() {
    let (tok, train, val) = tiny_setup();
    let dir = tempfile::tempdir().unwrap();
    let mut m = model(GuidanceVariant::DcMix, &tok);
    train_mixar(&mut m, &train, &val, None, |_, _| Ok(())).unwrap();
    m.save(dir.path()).unwrap();
    let mut back = MixarModel::load(dir.path()).unwrap();
    assert_eq!(back.epochs_done, 2);
    assert_eq!(back.metrics, m.metrics);
    for ((_, na, a), (_, nb, b)) in m.store.iter().zip(back.store.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a, b);
    }
    let plan = ValidationPlan::new(&m, &val).unwrap();
    assert_eq!(
        plan.loss(&m, GuidanceSource::GroundTruth).unwrap(),
        plan.loss(&back, GuidanceSource::GroundTruth).unwrap()
    );
    back.cfg.epochs = 3;
    train_mixar(&mut back, &train, &val, None, |_, _| Ok(())).unwrap();
    assert_eq!(back.epochs_done, 3);
    assert_eq!(back.train_loss.len(), 3);
}

#[test]
fn generation_covers_all_positions_and_is_deterministic() {
    let (tok, _, _) = tiny_setup();
    let gm = tiny_generator();
    let cfg = GenerateConfig {
        steps: 3,
        discrete_steps: 2,
        t_sample: 5,
        batch_size: 4,
        seed: 11,
        ..GenerateConfig::default()
    };
    let classes = [0, 1, 2, 0, 1, 2];
    for v in GuidanceVariant::ALL {
        let m = model(v, &tok);
        let g = if v.uses_guidance() { Some(&gm) } else { None };
        let a = generate_images(g, &m, &tok, &classes, &cfg).unwrap();
        let b = generate_images(g, &m, &tok, &classes, &cfg).unwrap();
        assert_eq!(a.images.pixels, b.images.pixels, "{v}");
        assert_eq!(a.images.len(), classes.len());
        assert_eq!(a.images.labels, classes.to_vec());
        assert!(a.provenance.iter().flatten().all(|&p| p == Provenance::Continuous));
        assert_eq!(a.head_evaluations, 5);
        let c = generate_images(g, &m, &tok, &classes, &GenerateConfig { seed: 12, ..cfg.clone() }).unwrap();
        assert_ne!(a.images.pixels, c.images.pixels);
    }
    let m = model(GuidanceVariant::DcMix, &tok);
    assert!(generate_images(None, &m, &tok, &classes, &cfg).is_err());
    let guided = GenerateConfig { guidance_scale: 2.0, ..cfg };
    assert_eq!(generate_images(Some(&gm), &m, &tok, &classes, &guided).unwrap().head_evaluations, 10);
}

// Eigenvalues of a symmetric 3x3 matrix from the trigonometric solution of
// its characteristic cubic.
fn sym3_eigenvalues(a: &DMatrix<f64>) -> [f64; 3] {
    let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
    let q = a.trace() / 3.0;
    let p2 = (0..3).map(|i| (a[(i, i)] - q).powi(2)).sum::<f64>() + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b = (a - DMatrix::identity(3, 3) * q) / p;
    let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

// tr((S1 S2)^{1/2}) = sum of square roots of the eigenvalues of S1 S2, which
// equal those of the symmetric L^T S2 L with S1 = L L^T (Cholesky).
fn oracle_frechet(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    let l = s1.clone().cholesky().unwrap().l();
    let c = l.transpose() * s2 * &l;
    let root: f64 = sym3_eigenvalues(&c).iter().map(|e| e.max(0.0).sqrt()).sum();
    (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * root
}

fn random_spd(r: &mut rng::Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(3, 3, |_, _| rng::normal(r));
    &a * a.transpose() + DMatrix::identity(3, 3) * 0.1
}

#[test]
fn frechet_matches_independent_oracle() {
    let mut r = rng::from_seed(9);
    for _ in 0..50 {
        let (s1, s2) = (random_spd(&mut r), random_spd(&mut r));
        let m1 = DVector::from_fn(3, |_, _| rng::normal(&mut r));
        let m2 = DVector::from_fn(3, |_, _| rng::normal(&mut r));
        let ours = frechet_distance(&m1, &s1, &m2, &s2).unwrap();
        let oracle = oracle_frechet(&m1, &s1, &m2, &s2);
        // the ridge shifts both traces by 3e-12 and the root term by about the same
        assert!((ours - oracle).abs() < 1e-8, "{ours} vs {oracle}");
    }
}

fn gaussian_samples(n: usize, mean: &[f64], seed: u64) -> Tensor<f64> {
    let mut r = rng::from_seed(seed);
    Tensor::from_fn(n, mean.len(), |_, c| mean[c] + rng::normal(&mut r))
}

#[test]
fn frechet_closed_forms() {
    let x = gaussian_samples(500, &[0.0; 4], 1);
    assert!(frechet_surrogate(&x, &x).unwrap().abs() < 1e-6);
    let a = gaussian_samples(10_000, &[0.0; 4], 2);
    let b = gaussian_samples(10_000, &[1.0, 0.0, 0.0, 0.0], 3);
    let d = frechet_surrogate(&a, &b).unwrap();
    assert!((d - 1.0).abs() < 0.05, "{d}");
    assert!(frechet_surrogate(&x, &gaussian_samples(1, &[0.0; 4], 4)).is_err());
    assert!(frechet_surrogate(&x, &gaussian_samples(10, &[0.0; 3], 4)).is_err());
}

#[test]
fn probe_separates_classes() {
    let ds = generate_dataset(&DatasetSpec::default()).unwrap();
    let train = ds.images.select(&ds.indices(Split::Train));
    let val = ds.images.select(&ds.indices(Split::Val));
    let mut probe = Probe::new(ProbeConfig::default(), train.pixels_per_image(), 8).unwrap();
    probe.train(&train).unwrap();
    let acc = probe.accuracy(&val).unwrap();
    assert!(acc >= 0.9, "held-out probe accuracy {acc}");
    let dir = tempfile::tempdir().unwrap();
    probe.save(dir.path()).unwrap();
    let back = Probe::load(dir.path()).unwrap();
    assert_eq!(back.predict(&val).unwrap(), probe.predict(&val).unwrap());
}

#[test]
fn metrics_jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m/metrics.jsonl");
    let rec = |e| MetricsRecord {
        epoch: e,
        train_loss: 1.5,
        val_loss_gt: 0.1 + e as f64,
        val_loss_gen: Some(0.3),
        frechet: None,
        sample_grid: Some("samples/grid.png".into()),
    };
    append_jsonl(&path, &[rec(1)]).unwrap();
    append_jsonl(&path, &[rec(2), rec(3)]).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), vec![rec(1), rec(2), rec(3)]);
}

fn paper_dims(n: usize, n_cls: usize) -> ProfileDims {
    ProfileDims {
        n_tokens: n,
        n_cls,
        ..ProfileDims::default()
    }
}

#[test]
fn profile_token_accounting() {
    let mix = profile_variant(GuidanceVariant::DcMix, &paper_dims(256, 64), None).unwrap();
    let sa = profile_variant(GuidanceVariant::DcSa, &paper_dims(256, 64), None).unwrap();
    assert_eq!(mix.tokens.with_cls, 320);
    assert_eq!(sa.tokens.without_cls, 512);
    assert_eq!((sa.tokens.without_cls - mix.tokens.with_cls) * 1000 / sa.tokens.without_cls, 375);
    assert!(mix.to_text().contains("tokens_with_cls: 320"));
}

#[test]
fn profile_pair_ratio_and_exactness() {
    for n in [16, 64, 256] {
        let mix = profile_variant(GuidanceVariant::DcMix, &paper_dims(n, 0), None).unwrap();
        let sa = profile_variant(GuidanceVariant::DcSa, &paper_dims(n, 0), None).unwrap();
        assert_eq!(sa.attention_pairs, 4 * mix.attention_pairs);
    }
    for v in GuidanceVariant::ALL {
        for (n, c, layers) in [(4, 0, 1), (9, 3, 2), (16, 4, 3)] {
            let dims = ProfileDims {
                layers,
                ..paper_dims(n, c)
            };
            let r = profile_variant(v, &dims, None).unwrap();
            assert_eq!(r.attention_pairs, r.attention_pairs_measured);
            assert_eq!(r.backbone_params, r.backbone_params_measured);
        }
    }
}

#[test]
fn profile_parameter_ordering() {
    let dims = ProfileDims::default();
    let p = |v| profile_variant(v, &dims, None).unwrap().total_params;
    let (mix, sa, ca, mar) = (
        p(GuidanceVariant::DcMix),
        p(GuidanceVariant::DcSa),
        p(GuidanceVariant::DcCa),
        p(GuidanceVariant::MarBaseline),
    );
    assert!(ca > sa && sa > mix);
    assert_eq!(mix, mar + dims.d_d * dims.width + dims.width - dims.width);
}

#[test]
fn profile_timing_fields() {
    let dims = ProfileDims {
        width: 16,
        layers: 1,
        head: HeadConfig { width: 16, blocks: 1 },
        ..ProfileDims::default()
    };
    let t = Timing {
        repeats: 1,
        decode_steps: 2,
        t_sample: 3,
    };
    let r = profile_variant(GuidanceVariant::DcCa, &dims, Some(t)).unwrap();
    assert!(r.train_step_ms.unwrap() > 0.0);
    assert!(r.sample_ms_per_image.unwrap() > 0.0);
    assert!(r.peak_live_bytes.unwrap() > 0);
}
