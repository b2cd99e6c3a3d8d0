use std::fs;
use std::path::{Path, PathBuf};

use mixar_core::backbone::{token_counts, BackboneConfig, GuidanceVariant};
use mixar_core::diffusion_head::HeadConfig;
use mixar_core::discrete_generator::{DiscreteArModel, DiscreteConfig};
use mixar_core::tokenizers::{train_tokenizers, TokenizerConfig, Tokenizers};
use mixar_core::toy_data::{generate_dataset, Dataset, DatasetSpec, ImageBatch, Split};
use mixar_core::training_eval::plots::{image_grid, line_plot, scatter_plot, Series};
use mixar_core::training_eval::{
    append_jsonl, frechet_surrogate, profile_variant, train_eval_gap, train_mixar, Evaluator, GenerateConfig,
    MetricsRecord, MixarModel, Probe, ProbeConfig, ProfileDims, Timing, TokenizedSet, TrainConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::rundir::{RunDir, METRICS};

const TOKENIZERS: &str = "tokenizers";
const PROBE: &str = "probe";
const DAR: &str = "dar";
const MIXAR: &str = "mixar";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerCmd {
    pub data: DatasetSpec,
    pub tokenizer: TokenizerConfig,
    pub probe: ProbeConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MixarTrainCmd {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Images per class generated at each evaluation point for the Fréchet
    /// surrogate; 0 skips sampling during training.
    pub frechet_per_class: usize,
    pub generate: GenerateConfig,
    /// Checkpoint to continue from: a run name or a checkpoint directory.
    pub init_from: String,
}

impl Default for MixarTrainCmd {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            frechet_per_class: 64,
            generate: GenerateConfig::default(),
            init_from: String::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleCmd {
    #[serde(flatten)]
    pub generate: GenerateConfig,
    pub per_class: usize,
    /// Restrict to one class; every class when absent.
    pub class: Option<usize>,
    pub grid_cols: usize,
}

impl Default for SampleCmd {
    fn default() -> Self {
        Self {
            generate: GenerateConfig::default(),
            per_class: 8,
            class: None,
            grid_cols: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalCmd {
    pub per_class: usize,
    pub generate: GenerateConfig,
    pub gap_batches: usize,
    /// Other runs (names under the same root) to include in the balance plot.
    pub balance_runs: Vec<String>,
}

impl Default for EvalCmd {
    fn default() -> Self {
        Self {
            per_class: 64,
            generate: GenerateConfig::default(),
            gap_batches: 8,
            balance_runs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileCmd {
    /// A variant name or `all`.
    pub variant: String,
    #[serde(rename = "N")]
    pub n_tokens: usize,
    #[serde(rename = "cls")]
    pub n_cls: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab: usize,
    pub d_c: usize,
    pub d_d: usize,
    pub n_classes: usize,
    pub head: HeadConfig,
    /// Also measure wall-clock and tape memory.
    pub time: bool,
    pub repeats: usize,
    pub decode_steps: usize,
    pub t_sample: usize,
}

impl Default for ProfileCmd {
    fn default() -> Self {
        let b = BackboneConfig::default();
        Self {
            variant: "dc-mix".into(),
            n_tokens: b.n_tokens,
            n_cls: b.n_cls,
            layers: b.layers,
            width: b.width,
            heads: b.heads,
            mlp_ratio: b.mlp_ratio,
            vocab: b.vocab,
            d_c: b.d_c,
            d_d: b.d_d,
            n_classes: b.n_classes,
            head: HeadConfig::default(),
            time: false,
            repeats: 3,
            decode_steps: 8,
            t_sample: 100,
        }
    }
}

fn json_of<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("configs serialize to JSON")
}

/// Built-in defaults of a command, as JSON.
pub fn defaults(command: &str) -> Value {
    match command {
        "tokenizer-train" => json_of(&TokenizerCmd::default()),
        "dar-train" => json_of(&DiscreteConfig::default()),
        "mixar-train" => json_of(&MixarTrainCmd::default()),
        "sample" => json_of(&SampleCmd::default()),
        "eval" => json_of(&EvalCmd::default()),
        "profile" => json_of(&ProfileCmd::default()),
        other => panic!("unknown command {other}"),
    }
}

fn data_of(run: &RunDir) -> Result<Dataset, CliError> {
    run.require(TOKENIZERS, "tokenizer-train")?;
    let spec: DatasetSpec = serde_json::from_value(run.stage("tokenizer-train")?["data"].clone())
        .map_err(|e| CliError::Core(e.into()))?;
    Ok(generate_dataset(&spec)?)
}

fn split(ds: &Dataset, s: Split) -> ImageBatch {
    ds.images.select(&ds.indices(s))
}

fn mse(a: &ImageBatch, b: &ImageBatch) -> f64 {
    let s: f64 = a.pixels.iter().zip(&b.pixels).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    s / a.pixels.len().max(1) as f64
}

pub fn tokenizer_train(run: &RunDir, mut cfg: TokenizerCmd) -> Result<Value, CliError> {
    cfg.data.validate()?;
    cfg.tokenizer.image_size = cfg.data.image_size;
    let ds = generate_dataset(&cfg.data)?;
    let train = split(&ds, Split::Train);
    let val = split(&ds, Split::Val);
    let tok = train_tokenizers(&train, &cfg.tokenizer)?;
    tok.save(&run.checkpoint(TOKENIZERS))?;
    let mut probe = Probe::new(cfg.probe.clone(), train.pixels_per_image(), cfg.data.n_classes)?;
    probe.train(&train)?;
    probe.save(&run.checkpoint(PROBE))?;

    let rec_c = tok.continuous.decode(&tok.continuous.encode(&val)?)?;
    let rec_d = tok.vq.decode(&tok.vq.tokenize(&val)?)?;
    let feats = probe.features(&val)?;
    let summary = json!({
        "data": cfg.data,
        "seeds": { "data": cfg.data.seed, "tokenizer": cfg.tokenizer.seed, "probe": cfg.probe.seed },
        "val_mse_continuous": mse(&val, &rec_c),
        "val_mse_vq": mse(&val, &rec_d),
        "codebook_usage": tok.vq.codebook_usage(&train)?,
        "probe_val_accuracy": probe.accuracy(&val)?,
        // Fréchet surrogate between validation images and their tokenizer round trip
        "roundtrip_frechet_continuous": frechet_surrogate(&feats, &probe.features(&rec_c)?)?,
        "roundtrip_frechet_vq": frechet_surrogate(&feats, &probe.features(&rec_d)?)?,
    });
    run.record_stage("tokenizer-train", summary.clone())?;
    Ok(summary)
}

fn load_tokenizers(run: &RunDir) -> Result<Tokenizers, CliError> {
    Ok(Tokenizers::load(&run.require(TOKENIZERS, "tokenizer-train")?)?)
}

pub fn dar_train(run: &RunDir, mut cfg: DiscreteConfig) -> Result<Value, CliError> {
    let tok = load_tokenizers(run)?;
    let ds = data_of(run)?;
    cfg.vocab = tok.vq.cfg.codebook_size;
    cfg.n_tokens = tok.vq.cfg.n_tokens();
    cfg.n_classes = ds.spec.n_classes;
    let train = split(&ds, Split::Train);
    let tokens = tok.vq.tokenize(&train)?;
    let mut model = DiscreteArModel::<f32>::new(cfg.clone())?;
    model.train(&tokens.indices, &train.labels)?;
    model.save(&run.checkpoint(DAR))?;
    let summary = json!({
        "seeds": { "init": cfg.seed },
        "final_loss": model.loss_history.last(),
        "epochs": cfg.epochs,
    });
    run.record_stage("dar-train", summary.clone())?;
    Ok(summary)
}

fn derive_geometry(b: &mut BackboneConfig, tok: &Tokenizers, n_classes: usize) {
    b.n_tokens = tok.continuous.cfg.n_tokens();
    b.d_c = tok.continuous.cfg.d_c;
    b.d_d = tok.vq.cfg.d_d;
    b.vocab = tok.vq.cfg.codebook_size;
    b.n_classes = n_classes;
}

fn reference_images(ds: &Dataset, count: usize) -> ImageBatch {
    let idx = ds.indices(Split::Train);
    ds.images.select(&idx[..count.min(idx.len())])
}

fn resolve_checkpoint(root: &Path, spec: &str) -> PathBuf {
    let p = PathBuf::from(spec);
    if mixar_core::checkpoint::exists(&p) {
        p
    } else {
        root.join(spec).join("checkpoints").join(MIXAR)
    }
}

fn loss_plot(run: &RunDir, model: &MixarModel) -> Result<(), CliError> {
    let pts = |f: &dyn Fn(&MetricsRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        model.metrics.iter().filter_map(|r| f(r).map(|v| (r.epoch as f64, v))).collect()
    };
    let series = vec![
        Series {
            name: "train".into(),
            points: model.train_loss.iter().enumerate().map(|(i, &l)| ((i + 1) as f64, l)).collect(),
        },
        Series {
            name: "val_gt".into(),
            points: pts(&|r| Some(r.val_loss_gt)),
        },
        Series {
            name: "val_gen".into(),
            points: pts(&|r| r.val_loss_gen),
        },
    ];
    line_plot(&run.path.join("plots/loss.png"), &series)?;
    Ok(())
}

pub fn mixar_train(run: &RunDir, root: &Path, mut cfg: MixarTrainCmd) -> Result<Value, CliError> {
    let tok = load_tokenizers(run)?;
    let ds = data_of(run)?;
    derive_geometry(&mut cfg.train.backbone, &tok, ds.spec.n_classes);
    cfg.train.validate()?;
    let generator = if cfg.train.needs_generator() {
        Some(DiscreteArModel::load(&run.require(DAR, "dar-train")?)?)
    } else if mixar_core::checkpoint::exists(&run.checkpoint(DAR)) {
        Some(DiscreteArModel::load(&run.checkpoint(DAR))?)
    } else {
        None
    };
    let mut model = if cfg.init_from.is_empty() {
        MixarModel::new(cfg.train.clone(), Some(tok.vq.codebook().codewords.clone()))?
    } else {
        let dir = resolve_checkpoint(root, &cfg.init_from);
        if !mixar_core::checkpoint::exists(&dir) {
            return Err(mixar_core::MixarError::Dependency(format!("no MixAR checkpoint at {}", dir.display())).into());
        }
        let mut m = MixarModel::load(&dir)?;
        let (old, new) = (&m.cfg, &cfg.train);
        if old.variant != new.variant || old.backbone != new.backbone || old.head != new.head || old.diffusion != new.diffusion {
            return Err(CliError::Usage(format!(
                "{} has a different architecture than the requested configuration",
                dir.display()
            )));
        }
        m.cfg = cfg.train.clone();
        m
    };
    let evaluator = if cfg.frechet_per_class > 0 {
        let probe = Probe::load(&run.require(PROBE, "tokenizer-train")?)?;
        let reference = reference_images(&ds, cfg.frechet_per_class * ds.spec.n_classes);
        Some(Evaluator::new(probe, &reference)?)
    } else {
        None
    };
    let train_set = TokenizedSet::from_images(&split(&ds, Split::Train), &tok)?;
    let val_set = TokenizedSet::from_images(&split(&ds, Split::Val), &tok)?;
    let before = model.metrics.len();
    let samples_dir = run.path.join("samples");
    train_mixar(&mut model, &train_set, &val_set, generator.as_ref(), |m, rec| {
        if let Some(ev) = &evaluator {
            let (out, scores) = ev.sample_and_score(generator.as_ref(), m, &tok, cfg.frechet_per_class, &cfg.generate)?;
            rec.frechet = Some(scores.frechet);
            let name = format!("epoch-{:04}.png", rec.epoch);
            let per = cfg.frechet_per_class.min(8);
            let idx: Vec<usize> = (0..ds.spec.n_classes)
                .flat_map(|c| (0..per).map(move |k| c * cfg.frechet_per_class + k))
                .collect();
            image_grid(&samples_dir.join(&name), &out.images.select(&idx), per, 4)?;
            rec.sample_grid = Some(format!("samples/{name}"));
        }
        eprintln!(
            "epoch {} train {:.4} val_gt {:.4} val_gen {} frechet {}",
            rec.epoch,
            rec.train_loss,
            rec.val_loss_gt,
            rec.val_loss_gen.map_or("-".into(), |v| format!("{v:.4}")),
            rec.frechet.map_or("-".into(), |v| format!("{v:.4}")),
        );
        Ok(())
    })?;
    append_jsonl(&run.path.join(METRICS), &model.metrics[before..])?;
    model.save(&run.checkpoint(MIXAR))?;
    loss_plot(run, &model)?;
    let summary = json!({
        "variant": model.cfg.variant,
        "seeds": model.cfg.seeds,
        "epochs_done": model.epochs_done,
        "generator_calls": model.generator_calls,
        "num_params": model.num_params(),
        "init_from": cfg.init_from,
        "last_metrics": model.metrics.last(),
    });
    run.record_stage("mixar-train", summary.clone())?;
    Ok(summary)
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sample(run: &RunDir, cfg: SampleCmd) -> Result<Value, CliError> {
    let tok = load_tokenizers(run)?;
    let gm = DiscreteArModel::load(&run.require(DAR, "dar-train")?)?;
    let model = MixarModel::load(&run.require(MIXAR, "mixar-train")?)?;
    let n_classes = model.cfg.backbone.n_classes;
    let classes: Vec<usize> = match cfg.class {
        Some(c) if c >= n_classes => return Err(CliError::Usage(format!("class {c} out of range"))),
        Some(c) => vec![c; cfg.per_class],
        None => mixar_core::training_eval::balanced_classes(n_classes, cfg.per_class),
    };
    let out = mixar_core::training_eval::generate_images(Some(&gm), &model, &tok, &classes, &cfg.generate)?;
    let stem = format!("sample-seed{}", cfg.generate.seed);
    let dir = run.path.join("samples");
    let raw = out.images.to_bytes();
    fs::write(dir.join(format!("{stem}.bin")), &raw)?;
    image_grid(&dir.join(format!("{stem}.png")), &out.images, cfg.grid_cols, 4)?;
    let png = fs::read(dir.join(format!("{stem}.png")))?;
    let continuous = out
        .provenance
        .iter()
        .flatten()
        .filter(|&&p| p == mixar_core::mixture::Provenance::Continuous)
        .count();
    let info = json!({
        "labels": out.images.labels,
        "guidance": out.guidance,
        "provenance_continuous": continuous,
        "positions": out.provenance.iter().map(Vec::len).sum::<usize>(),
        "head_evaluations": out.head_evaluations,
    });
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string(&info).map_err(|e| CliError::Core(e.into()))?)?;
    let summary = json!({
        "images": out.images.len(),
        "bin": format!("samples/{stem}.bin"),
        "png": format!("samples/{stem}.png"),
        "sha256_bin": hex(&raw),
        "sha256_png": hex(&png),
        "provenance_continuous": continuous,
        "positions": info["positions"],
        "seeds": { "generate": cfg.generate.seed },
    });
    run.record_stage("sample", summary.clone())?;
    Ok(summary)
}

pub fn eval(run: &RunDir, root: &Path, cfg: EvalCmd) -> Result<Value, CliError> {
    let tok = load_tokenizers(run)?;
    let ds = data_of(run)?;
    let gm = DiscreteArModel::load(&run.require(DAR, "dar-train")?)?;
    let model = MixarModel::load(&run.require(MIXAR, "mixar-train")?)?;
    let probe = Probe::load(&run.require(PROBE, "tokenizer-train")?)?;
    let n_classes = ds.spec.n_classes;
    let ev = Evaluator::new(probe, &reference_images(&ds, cfg.per_class * n_classes))?;
    let (out, scores) = ev.sample_and_score(Some(&gm), &model, &tok, cfg.per_class, &cfg.generate)?;
    let val_set = TokenizedSet::from_images(&split(&ds, Split::Val), &tok)?;
    let (gt, gen) = train_eval_gap(&model, &val_set, &gm, cfg.gap_batches)?;
    let grid = format!("samples/eval-epoch-{:04}.png", model.epochs_done);
    let per = cfg.per_class.min(8);
    let idx: Vec<usize> = (0..n_classes).flat_map(|c| (0..per).map(move |k| c * cfg.per_class + k)).collect();
    image_grid(&run.path.join(&grid), &out.images.select(&idx), per, 4)?;
    let b = &model.cfg.backbone;
    let tokens = token_counts(model.cfg.variant, b.n_tokens, b.n_cls);
    let report = json!({
        "variant": model.cfg.variant,
        "epochs": model.epochs_done,
        "frechet": scores.frechet,
        "probe_accuracy": scores.probe_accuracy,
        "val_loss_gt": gt,
        "val_loss_gen": gen,
        "train_eval_gap": gen - gt,
        "tokens_with_cls": tokens.with_cls,
        "tokens_without_cls": tokens.without_cls,
        "generated_images": out.images.len(),
        "sample_grid": grid,
    });
    fs::write(
        run.path.join("eval.json"),
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Core(e.into()))? + "\n",
    )?;
    append_jsonl(
        &run.path.join(METRICS),
        &[MetricsRecord {
            epoch: model.epochs_done,
            train_loss: model.train_loss.last().copied().unwrap_or(f64::NAN),
            val_loss_gt: gt,
            val_loss_gen: Some(gen),
            frechet: Some(scores.frechet),
            sample_grid: Some(grid),
        }],
    )?;
    loss_plot(run, &model)?;

    // balance plot: Fréchet surrogate against attended token count
    let mut points = vec![(run.path.clone(), report.clone())];
    for name in &cfg.balance_runs {
        let p = root.join(name);
        let text = fs::read_to_string(p.join("eval.json")).map_err(|_| {
            CliError::Core(mixar_core::MixarError::Dependency(format!("run {name} has no eval.json; evaluate it first")))
        })?;
        points.push((p, serde_json::from_str(&text).map_err(|e| CliError::Core(e.into()))?));
    }
    let series: Vec<Series> = points
        .iter()
        .map(|(p, r)| Series {
            name: p.display().to_string(),
            points: vec![(r["tokens_with_cls"].as_f64().unwrap_or(f64::NAN), r["frechet"].as_f64().unwrap_or(f64::NAN))],
        })
        .collect();
    scatter_plot(&run.path.join("plots/balance.png"), &series)?;
    let legend: Vec<Value> = points
        .iter()
        .map(|(p, r)| json!({"run": p.display().to_string(), "variant": r["variant"], "tokens_with_cls": r["tokens_with_cls"], "frechet": r["frechet"]}))
        .collect();
    fs::write(
        run.path.join("plots/balance.json"),
        serde_json::to_string_pretty(&legend).map_err(|e| CliError::Core(e.into()))? + "\n",
    )?;
    run.record_stage("eval", report.clone())?;
    Ok(report)
}

pub fn profile(cfg: &ProfileCmd) -> Result<Vec<String>, CliError> {
    let variants: Vec<GuidanceVariant> = if cfg.variant == "all" {
        GuidanceVariant::ALL.to_vec()
    } else {
        vec![cfg.variant.parse().map_err(|e: mixar_core::MixarError| CliError::Usage(e.to_string()))?]
    };
    let dims = ProfileDims {
        n_tokens: cfg.n_tokens,
        n_cls: cfg.n_cls,
        layers: cfg.layers,
        width: cfg.width,
        heads: cfg.heads,
        mlp_ratio: cfg.mlp_ratio,
        vocab: cfg.vocab,
        d_c: cfg.d_c,
        d_d: cfg.d_d,
        n_classes: cfg.n_classes,
        head: cfg.head.clone(),
    };
    let timing = cfg.time.then_some(Timing {
        repeats: cfg.repeats,
        decode_steps: cfg.decode_steps,
        t_sample: cfg.t_sample,
    });
    variants
        .into_iter()
        .map(|v| Ok(profile_variant(v, &dims, timing)?.to_text()))
        .collect()
}
