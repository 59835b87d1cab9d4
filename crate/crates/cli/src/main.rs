//! `graftkit`: data synthesis, training, evaluation and feature decoding
//! for network grafting experiments.

mod commands;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Map, Value};

use config::{read_config_file, resolve, RunConfig};

#[derive(Parser)]
#[command(name = "graftkit", version, about = "Network grafting experiments from the command line")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a grafted front end, or a supervised classifier (mode=pretrain|supervised).
    Train(TrainArgs),
    /// Top-1 error of a checkpoint, or AP50 (and NMS fusion) of box records.
    Eval(EvalArgs),
    /// Invert front-end features into an intensity-like image.
    Decode(DecodeArgs),
    /// Accumulate an event file into a voxel grid.
    Voxelize(VoxelizeArgs),
    /// Write a synthetic paired dataset built from MNIST-format images.
    SynthData(SynthArgs),
    /// Train every loss-term subset and tabulate test error.
    Ablate(AblateArgs),
    /// Train one grafted model per split point and tabulate test error.
    SplitSweep(SweepArgs),
}

/// Flags shared by every subcommand.
#[derive(Args, Serialize)]
struct Common {
    /// JSON object or `key = value` file.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Extra `key=value` setting; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    #[serde(skip)]
    set: Vec<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[arg(long = "batch_size", alias = "batch-size")]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    /// Output directory; the GRAFTKIT_OUT environment variable takes precedence.
    #[arg(long = "out_dir", alias = "out-dir")]
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dir: Option<String>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// graft, pretrain or supervised.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pretrained: Option<String>,
    #[arg(long = "data_manifest", alias = "data-manifest")]
    #[serde(skip_serializing_if = "Option::is_none")]
    data_manifest: Option<String>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<String>,
    #[arg(long = "data_manifest", alias = "data-manifest")]
    #[serde(skip_serializing_if = "Option::is_none")]
    data_manifest: Option<String>,
    /// JSON-lines box records (detections and ground truth).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    boxes: Option<String>,
    /// Second detection set to merge with `--boxes`.
    #[arg(long = "boxes_b", alias = "boxes-b")]
    #[serde(skip_serializing_if = "Option::is_none")]
    boxes_b: Option<String>,
}

#[derive(Args, Serialize)]
struct DecodeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pretrained: Option<String>,
    /// Grafted checkpoint; without it the pretrained front's own frame features are decoded.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<String>,
    #[arg(long = "data_manifest", alias = "data-manifest")]
    #[serde(skip_serializing_if = "Option::is_none")]
    data_manifest: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[arg(long = "tv_weight", alias = "tv-weight")]
    #[serde(skip_serializing_if = "Option::is_none")]
    tv_weight: Option<f64>,
    #[arg(long = "sample_index", alias = "sample-index")]
    #[serde(skip_serializing_if = "Option::is_none")]
    sample_index: Option<usize>,
}

#[derive(Args, Serialize)]
struct VoxelizeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// Event file: CSV (t,x,y,p) or N-MNIST binary.
    #[arg(long = "in")]
    #[serde(skip_serializing_if = "Option::is_none")]
    events: Option<String>,
    /// Number of temporal slices.
    #[arg(long = "D")]
    #[serde(skip_serializing_if = "Option::is_none")]
    slices: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    height: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    width: Option<usize>,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// events or thermal.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    #[arg(long = "mnist_dir", alias = "mnist-dir")]
    #[serde(skip_serializing_if = "Option::is_none")]
    mnist_dir: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    limit: Option<usize>,
}

#[derive(Args, Serialize)]
struct AblateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pretrained: Option<String>,
    #[arg(long = "data_manifest", alias = "data-manifest")]
    #[serde(skip_serializing_if = "Option::is_none")]
    data_manifest: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    repeats: Option<usize>,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pretrained: Option<String>,
    #[arg(long = "data_manifest", alias = "data-manifest")]
    #[serde(skip_serializing_if = "Option::is_none")]
    data_manifest: Option<String>,
    /// Comma-separated `front:mid_end` pairs.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    splits: Option<String>,
}

type Runner = fn(&RunConfig, &Path) -> Result<()>;

/// Merges defaults, config file, `--set` pairs and flags, then applies GRAFTKIT_OUT.
fn settle<A: Serialize>(args: &A, common: &Common) -> Result<RunConfig> {
    let mut layers = Vec::new();
    if let Some(path) = &common.config {
        layers.push(read_config_file(path)?);
    }
    let mut sets = Map::new();
    for pair in &common.set {
        let (k, v) = config::parse_pair(pair)?;
        sets.insert(k, v);
    }
    layers.push(sets);
    match serde_json::to_value(args)? {
        Value::Object(flags) => layers.push(flags),
        _ => unreachable!("argument structs serialize to objects"),
    }
    if let Some(out) = std::env::var_os("GRAFTKIT_OUT").filter(|v| !v.is_empty()) {
        let mut env = Map::new();
        env.insert("out_dir".into(), Value::String(out.to_string_lossy().into_owned()));
        layers.push(env);
    }
    resolve(layers)
}

fn execute<A: Serialize>(args: &A, common: &Common, run: Runner) -> Result<()> {
    let cfg = settle(args, common)?;
    let out = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let echo = serde_json::to_string_pretty(&cfg)? + "\n";
    fs::write(out.join("config_echo.json"), echo).context("writing config echo")?;
    run(&cfg, &out)
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => execute(a, &a.common, commands::train),
        Command::Eval(a) => execute(a, &a.common, commands::eval),
        Command::Decode(a) => execute(a, &a.common, commands::decode),
        Command::Voxelize(a) => execute(a, &a.common, commands::voxelize_events),
        Command::SynthData(a) => execute(a, &a.common, commands::synth_data),
        Command::Ablate(a) => execute(a, &a.common, commands::ablate),
        Command::SplitSweep(a) => execute(a, &a.common, commands::split_sweep),
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<graftkit_core::Error>() {
            return e.kind();
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return "config";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "invalid"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = json!({ "error": format!("{err:#}"), "kind": error_kind(&err) });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
