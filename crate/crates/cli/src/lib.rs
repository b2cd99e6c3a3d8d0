//! Driver for the four-stage pipeline: `tokenizer-train`, `dar-train`,
//! `mixar-train`, then `sample` / `eval`; plus `profile`.

pub mod commands;
pub mod config;
pub mod error;
pub mod rundir;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::parser::ValueSource;
use clap::{Arg, ArgMatches, Command};
use serde_json::Value;

use crate::config::{flag_name, get_path, leaf_keys, parse_flag, read_file, resolve};
use crate::error::CliError;
use crate::rundir::{default_root, RunDir, ROOT_ENV};

pub const COMMANDS: [(&str, &str); 6] = [
    ("tokenizer-train", "Generate the toy dataset, train both tokenizers and the probe classifier"),
    ("dar-train", "Train the discrete masked generator on codebook indices"),
    ("mixar-train", "Train (or continue) the guided continuous model"),
    ("sample", "Generate images with all three trained stages"),
    ("eval", "Fréchet surrogate, probe accuracy, train/inference gap and plots"),
    ("profile", "Token, attention and parameter counts for a guidance variant"),
];

fn describe(v: &Value) -> String {
    match v {
        Value::Null => "unset".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn cli() -> Command {
    let mut root = Command::new("mixar")
        .about("Discrete-guided masked autoregressive image generation on a toy domain")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in COMMANDS {
        let defaults = commands::defaults(name);
        let mut sc = Command::new(name)
            .about(about)
            .arg(Arg::new("run").long("run").value_name("NAME").help("Run directory name (default: default)"))
            .arg(
                Arg::new("runs-root")
                    .long("runs-root")
                    .value_name("DIR")
                    .help(format!("Parent of run directories (default: ${ROOT_ENV} or ./runs)")),
            )
            .arg(Arg::new("config").long("config").value_name("FILE").help("TOML file layered over the defaults"));
        for key in leaf_keys(&defaults) {
            let d = get_path(&defaults, &key).cloned().unwrap_or(Value::Null);
            sc = sc.arg(
                Arg::new(key.clone())
                    .long(flag_name(&key))
                    .value_name("VALUE")
                    .help(format!("default: {}", describe(&d))),
            );
        }
        root = root.subcommand(sc);
    }
    root
}

fn flag_overrides(m: &ArgMatches, defaults: &Value) -> Result<Vec<(String, Value)>, CliError> {
    let mut out = Vec::new();
    for key in leaf_keys(defaults) {
        if m.value_source(&key) == Some(ValueSource::CommandLine) {
            let raw = m.get_one::<String>(&key).expect("flag value");
            let d = get_path(defaults, &key).cloned().unwrap_or(Value::Null);
            out.push((key.clone(), parse_flag(&key, raw, &d)?));
        }
    }
    Ok(out)
}

fn print(v: &Value) {
    if let Value::Object(m) = v {
        for (k, x) in m {
            println!("{k}: {}", describe(x));
        }
    }
}

fn dispatch(name: &str, m: &ArgMatches) -> Result<(), CliError> {
    let defaults = commands::defaults(name);
    let file = match m.get_one::<String>("config") {
        Some(p) => Some(read_file(&PathBuf::from(p), name)?),
        None => None,
    };
    let flags = flag_overrides(m, &defaults)?;
    let root = m.get_one::<String>("runs-root").map_or_else(default_root, PathBuf::from);
    let run_name = m.get_one::<String>("run").cloned();
    let open = || RunDir::open(&root, run_name.as_deref().unwrap_or("default"));
    match name {
        "tokenizer-train" => {
            let (cfg, resolved) = resolve(&defaults, file.as_ref(), &flags)?;
            let run = open()?;
            run.write_resolved(name, &resolved)?;
            print(&commands::tokenizer_train(&run, cfg)?);
        }
        "dar-train" => {
            let (cfg, resolved) = resolve(&defaults, file.as_ref(), &flags)?;
            let run = open()?;
            run.write_resolved(name, &resolved)?;
            print(&commands::dar_train(&run, cfg)?);
        }
        "mixar-train" => {
            let (cfg, resolved) = resolve(&defaults, file.as_ref(), &flags)?;
            let run = open()?;
            run.write_resolved(name, &resolved)?;
            print(&commands::mixar_train(&run, &root, cfg)?);
        }
        "sample" => {
            let (cfg, resolved) = resolve(&defaults, file.as_ref(), &flags)?;
            let run = open()?;
            run.write_resolved(name, &resolved)?;
            print(&commands::sample(&run, cfg)?);
        }
        "eval" => {
            let (cfg, resolved) = resolve(&defaults, file.as_ref(), &flags)?;
            let run = open()?;
            run.write_resolved(name, &resolved)?;
            print(&commands::eval(&run, &root, cfg)?);
        }
        "profile" => {
            let (cfg, resolved): (commands::ProfileCmd, Value) = resolve(&defaults, file.as_ref(), &flags)?;
            let reports = commands::profile(&cfg)?;
            let text = reports.join("\n");
            print!("{text}");
            // only persisted when a run is named explicitly
            if run_name.is_some() {
                let run = open()?;
                run.write_resolved(name, &resolved)?;
                std::fs::write(run.path.join(format!("profile-{}.txt", cfg.variant)), &text)?;
                run.record_stage("profile", serde_json::json!({ "variant": cfg.variant, "report": text }))?;
            }
        }
        other => return Err(CliError::Usage(format!("unknown subcommand {other}"))),
    }
    Ok(())
}

/// Runs one command line (including the program name) and returns the exit
/// code: 0 success, 2 usage, 3 missing upstream checkpoint, 4 numerical
/// abort, 1 anything else.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 };
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()).line());
            return 2;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match dispatch(name, sub) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.category().1
        }
    }
}
