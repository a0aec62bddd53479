use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use causaltad::config::RunConfig;
use causaltad::data::{load_annotations, read_predictions, write_predictions, Predictions, Subset};
use causaltad::error::Error;
use causaltad::eval::detection_map;
use causaltad::gradcheck::{grad_check, Component};
use causaltad::head::{read_raw, write_raw, RawDetectorOutput};
use causaltad::pipeline::{infer_all, predictions_from_raws, run_ablation, train_split, Split};
use causaltad::postprocess::{compose_actions, ensemble};
use causaltad::synth::synth_dataset;
use causaltad::train::Checkpoint;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "causaltad", version, about = "Temporal action detection with hybrid causal blocks")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset into paths.data_dir.
    Synth,
    /// Train on the train split and write a checkpoint.
    Train {
        /// Checkpoint path (default: <paths.out_dir>/checkpoint.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a checkpoint over a split and write predictions.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Predictions path (default: <paths.out_dir>/predictions_<split>.json).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the undecoded head outputs to this file.
        #[arg(long)]
        emit_raw: Option<PathBuf>,
        /// Use the raw weights instead of their moving average.
        #[arg(long)]
        raw_weights: bool,
    },
    /// Average raw outputs of several runs, then decode and suppress.
    Ensemble {
        /// Raw output files (noun models when --verbs is given).
        #[arg(required = true)]
        raws: Vec<PathBuf>,
        /// Verb-model raw files; switches to noun×verb action composition.
        #[arg(long, num_args = 1..)]
        verbs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the averaged raw outputs.
        #[arg(long)]
        emit_raw: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Annotation file (default: <paths.data_dir>/annotations.json).
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Subset to score: train, val, test or all.
        #[arg(long, default_value = "val")]
        subset: String,
        /// Report JSON path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score every branch × context variant on a synthetic set.
    Ablate {
        /// Report JSON path (default: <paths.out_dir>/ablation.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks at 64-bit.
    Gradcheck {
        /// identity, primitives, attention, scan, block, model or all.
        #[arg(long, default_value = "all")]
        component: String,
        #[arg(long, default_value_t = 8)]
        len: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::DivergedAtStep { .. } | Error::GradientOverflow { .. } => 3,
        Error::Io { .. } | Error::Json { .. } | Error::NotFound(_) | Error::CorruptFeatureFile { .. } | Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn config_help() -> String {
    let mut s = String::from("Config keys (defaults):\n");
    for (k, v) in RunConfig::documented_keys() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s
}

fn parse_subset(s: &str) -> Result<Option<Subset>, Error> {
    if s == "all" {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

fn synth(cfg: &RunConfig) -> CmdResult {
    let ds = synth_dataset(&cfg.synth)?;
    ds.write(&cfg.paths.data_dir)?;
    println!(
        "wrote {} videos ({} segments) to {}",
        ds.sequences.len(),
        ds.annotations.num_segments(),
        cfg.paths.data_dir.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig, out: Option<PathBuf>) -> CmdResult {
    let split = Split::load(&cfg.paths.manifest(), &cfg.paths.annotations(), Subset::Train)?;
    let start = Instant::now();
    let outcome = train_split(cfg, &split)?;
    println!("{:>6}  {:>10}", "epoch", "loss");
    for (e, l) in outcome.epoch_losses.iter().enumerate() {
        println!("{:>6}  {:>10.5}", e + 1, l);
    }
    let path = out.unwrap_or_else(|| cfg.paths.out_dir.join("checkpoint.ckpt"));
    outcome.checkpoint.save(&path)?;
    println!("trained {} videos in {:.1}s, checkpoint {}", split.sequences.len(), start.elapsed().as_secs_f64(), path.display());
    Ok(())
}

fn infer(cfg: &RunConfig, checkpoint: &Path, split: &str, out: Option<PathBuf>, emit_raw: Option<PathBuf>, raw_weights: bool) -> CmdResult {
    let subset: Subset = split.parse()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = Split::load(&cfg.paths.manifest(), &cfg.paths.annotations(), subset)?;
    let (det, store) = ckpt.detector(!raw_weights)?;
    let raws = infer_all(&det, &store, &data.sequences)?;
    if let Some(p) = emit_raw {
        write_raw(&p, &raws)?;
    }
    let preds = predictions_from_raws(cfg, &raws);
    let path = out.unwrap_or_else(|| cfg.paths.out_dir.join(format!("predictions_{split}.json")));
    write_predictions(&path, &preds)?;
    println!("{} videos, {} proposals -> {}", preds.len(), preds.values().map(Vec::len).sum::<usize>(), path.display());
    Ok(())
}

fn load_grouped(paths: &[PathBuf]) -> Result<BTreeMap<String, Vec<RawDetectorOutput>>, Error> {
    let mut by_video: BTreeMap<String, Vec<RawDetectorOutput>> = BTreeMap::new();
    for p in paths {
        for raw in read_raw(p)? {
            by_video.entry(raw.video_id.clone()).or_default().push(raw);
        }
    }
    if let Some((vid, rs)) = by_video.iter().find(|(_, rs)| rs.len() != paths.len()) {
        return Err(Error::InvalidData(format!("video {vid} appears in {} of {} raw files", rs.len(), paths.len())));
    }
    Ok(by_video)
}

fn ensemble_cmd(cfg: &RunConfig, raws: &[PathBuf], verbs: &[PathBuf], out: &Path, emit_raw: Option<PathBuf>) -> CmdResult {
    let nouns = load_grouped(raws)?;
    let merged: Vec<RawDetectorOutput> = nouns.values().map(|rs| ensemble(rs)).collect::<Result<_, _>>()?;
    if let Some(p) = emit_raw {
        write_raw(&p, &merged)?;
    }
    let preds: Predictions = if verbs.is_empty() {
        predictions_from_raws(cfg, &merged)
    } else {
        let verb_groups = load_grouped(verbs)?;
        let mut preds = Predictions::new();
        for noun in &merged {
            let vs = verb_groups
                .get(&noun.video_id)
                .ok_or_else(|| Error::InvalidData(format!("no verb outputs for {}", noun.video_id)))?;
            let verb = ensemble(vs)?;
            preds.insert(noun.video_id.clone(), compose_actions(noun, &verb, &cfg.compose, &cfg.decode, &cfg.nms)?);
        }
        preds
    };
    write_predictions(out, &preds)?;
    println!("ensembled {} runs over {} videos -> {}", raws.len(), merged.len(), out.display());
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, pred: &Path, gt: Option<PathBuf>, subset: &str, out: Option<PathBuf>) -> CmdResult {
    let db = load_annotations(&gt.unwrap_or_else(|| cfg.paths.annotations()))?;
    let db = match parse_subset(subset)? {
        Some(s) => db.subset(s),
        None => db,
    };
    let preds = read_predictions(pred)?;
    let report = detection_map(&preds, &db, &cfg.eval.thresholds, &cfg.eval.recall)?;
    print!("{}", report.table());
    if let Some(p) = out {
        report.save(&p)?;
    }
    Ok(())
}

fn ablate(cfg: &RunConfig, out: Option<PathBuf>) -> CmdResult {
    let ds = synth_dataset(&cfg.synth)?;
    let train = Split::from_synth(&ds, Subset::Train);
    let val = Split::from_synth(&ds, Subset::Val);
    let report = run_ablation(cfg, &train, &val, |row| {
        log::info!("{}: {:.4}", row.label, row.mean);
    })?;
    print!("{}", report.table());
    let path = out.unwrap_or_else(|| cfg.paths.out_dir.join("ablation.json"));
    report.save(&path)?;
    Ok(())
}

fn gradcheck(component: &str, len: usize, eps: f64, tol: f64, seed: u64) -> CmdResult {
    let components: Vec<Component> = if component == "all" { Component::ALL.to_vec() } else { vec![component.parse()?] };
    let mut failed = Vec::new();
    for c in components {
        let report = grad_check(c, len, eps, tol, seed)?;
        print!("{report}");
        if !report.passed {
            failed.push(report.component);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn run(cli: Cli) -> CmdResult {
    let cfg = RunConfig::load(cli.global.config.as_deref(), &cli.global.overrides)?;
    match cli.command {
        Command::Synth => synth(&cfg),
        Command::Train { out } => train(&cfg, out),
        Command::Infer { checkpoint, split, out, emit_raw, raw_weights } => {
            infer(&cfg, &checkpoint, &split, out, emit_raw, raw_weights)
        }
        Command::Ensemble { raws, verbs, out, emit_raw } => ensemble_cmd(&cfg, &raws, &verbs, &out, emit_raw),
        Command::Eval { pred, gt, subset, out } => eval_cmd(&cfg, &pred, gt, &subset, out),
        Command::Ablate { out } => ablate(&cfg, out),
        Command::Gradcheck { component, len, eps, tol, seed } => gradcheck(&component, len, eps, tol, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("CAUSALTAD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let help = config_help();
    let mut command = Cli::command().after_help(help.clone());
    let names: Vec<String> = command.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        let help = help.clone();
        command = command.mut_subcommand(name, |sc| sc.after_help(help));
    }
    let matches = command.get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
