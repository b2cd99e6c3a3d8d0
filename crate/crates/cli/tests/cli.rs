use std::path::Path;
use std::process::{Command, Output};

fn mixar(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixar"))
        .args(args)
        .env("MIXAR_RUNS_ROOT", root)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(o: &Output, key: &str) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")).map(str::to_string))
        .unwrap_or_else(|| panic!("no {key} in {}", stdout(o)))
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        o.status.code(),
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

const TINY_DATA: &[&str] = &[
    "--data.images-per-class",
    "12",
    "--data.image-size",
    "16",
    "--data.n-classes",
    "3",
    "--tokenizer.epochs",
    "2",
    "--tokenizer.hidden",
    "16",
    "--tokenizer.codebook-size",
    "16",
    "--probe.epochs",
    "2",
];

const TINY_DAR: &[&str] = &["--epochs", "1", "--width", "16", "--layers", "1", "--heads", "2", "--n-cls", "2"];

const TINY_MIXAR: &[&str] = &[
    "--batch-size",
    "8",
    "--backbone.width",
    "16",
    "--backbone.layers",
    "1",
    "--backbone.heads",
    "2",
    "--backbone.n-cls",
    "2",
    "--head.width",
    "16",
    "--head.blocks",
    "1",
    "--diffusion.t-sample",
    "5",
    "--frechet-per-class",
    "0",
    "--eval-every",
    "1",
];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn profile_prints_paper_token_count() {
    let root = tempfile::tempdir().unwrap();
    let o = mixar(root.path(), &["profile", "--variant", "dc-mix", "--N", "256", "--cls", "64"]);
    ok(&o);
    assert_eq!(field(&o, "tokens_with_cls"), "320");
    let sa = mixar(root.path(), &["profile", "--variant", "dc-sa", "--N", "256", "--cls", "64"]);
    assert_eq!(field(&sa, "tokens_without_cls"), "512");
    // nothing is written without an explicit run
    assert!(!root.path().join("default").exists());
}

#[test]
fn usage_errors_exit_2() {
    let root = tempfile::tempdir().unwrap();
    let o = mixar(root.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mixar(root.path(), &["profile", "--no-such-key", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[usage]:"), "{err}");
    let cfg = root.path().join("bad.toml");
    std::fs::write(&cfg, "variant = \"dc-mix\"\nbogus = 3\n").unwrap();
    let o = mixar(root.path(), &["profile", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    // flattened configs too
    std::fs::write(&cfg, "epochs = 1\n[backbone]\nwdth = 3\n").unwrap();
    let o = mixar(root.path(), &["mixar-train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = mixar(root.path(), &["profile", "--variant", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mixar(root.path(), &["profile", "--N", "many"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_upstream_checkpoints_exit_3() {
    let root = tempfile::tempdir().unwrap();
    for cmd in ["dar-train", "mixar-train", "sample", "eval"] {
        let o = mixar(root.path(), &[cmd, "--run", "empty"]);
        assert_eq!(o.status.code(), Some(3), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[dependency]:"));
    }
}

#[test]
fn full_pipeline() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    ok(&mixar(r, &with(&["tokenizer-train", "--run", "p"], TINY_DATA)));

    // TI-Mix without a discrete generator refuses to start
    let o = mixar(r, &with(&["mixar-train", "--run", "p", "--ti-mix.lambda-end", "0", "--ti-mix.start-epoch", "0"], TINY_MIXAR));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dar-train"));
    assert_eq!(o.status.code(), Some(3));

    // lambda held at 1: no generator needed, none invoked
    let o = mixar(
        r,
        &with(&["mixar-train", "--run", "p", "--ti-mix.lambda-start", "1", "--ti-mix.lambda-end", "1", "--epochs", "2"], TINY_MIXAR),
    );
    ok(&o);
    assert_eq!(field(&o, "generator_calls"), "0");

    ok(&mixar(r, &with(&["dar-train", "--run", "p"], TINY_DAR)));

    // continue the checkpoint with TI-Mix for two more epochs
    let o = mixar(
        r,
        &with(
            &["mixar-train", "--run", "p", "--init-from", "p", "--ti-mix.start-epoch", "2", "--ti-mix.lambda-end", "0"],
            &with(TINY_MIXAR, &["--epochs", "4"]),
        ),
    );
    ok(&o);
    assert_eq!(field(&o, "epochs_done"), "4");
    assert_ne!(field(&o, "generator_calls"), "0");

    let sample = |seed: &str| {
        let o = mixar(r, &["sample", "--run", "p", "--seed", seed, "--per-class", "2", "--t-sample", "4"]);
        ok(&o);
        o
    };
    let a = sample("7");
    let b = sample("7");
    assert_eq!(field(&a, "sha256_bin"), field(&b, "sha256_bin"));
    assert_eq!(field(&a, "sha256_png"), field(&b, "sha256_png"));
    assert_eq!(field(&a, "provenance_continuous"), field(&a, "positions"));
    assert_ne!(field(&a, "sha256_bin"), field(&sample("8"), "sha256_bin"));

    let o = mixar(r, &["eval", "--run", "p", "--per-class", "4", "--generate.t-sample", "4", "--gap-batches", "1"]);
    ok(&o);
    let run = r.join("p");
    for f in ["config.resolved", "manifest.json", "metrics.jsonl", "eval.json", "plots/loss.png", "plots/balance.png"] {
        assert!(run.join(f).exists(), "{f}");
    }
    for c in ["tokenizers/continuous", "tokenizers/vq", "probe", "dar", "mixar"] {
        assert!(run.join("checkpoints").join(c).join("manifest.json").exists(), "{c}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    // 2 + 2 training evaluations plus the eval record
    assert_eq!(metrics.lines().count(), 5);

    // the written-back config reproduces a run
    let resolved = run.join("config.resolved");
    let text = std::fs::read_to_string(&resolved).unwrap();
    assert!(text.contains("[mixar-train]") && text.contains("[sample]"));
    let again = mixar(r, &["sample", "--run", "p", "--config", resolved.to_str().unwrap()]);
    ok(&again);
    assert_eq!(field(&again, "sha256_bin"), field(&sample("8"), "sha256_bin"));
}
