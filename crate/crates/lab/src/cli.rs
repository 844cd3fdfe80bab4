//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use zslab_core::data::{generate_dataset, Modality};
use zslab_core::gradcheck::{run_named, SUITE};
use zslab_core::metrics::{rank_gallery, Features};
use zslab_core::train::TrainMode;

use crate::checkpoint::Checkpoint;
use crate::config::{key_listing, ConfigSource, RunConfig};
use crate::driver::{self, evaluate_features, prepare, report_json, Prepared, TrainOptions, CHECKPOINT_FILE};
use crate::error::{LabError, Result};
use crate::format::{
    canonical_json, export_embeddings, load_embeddings, save_dataset, save_embeddings, write_file, EmbeddingFile,
};

#[derive(Parser, Debug)]
#[command(name = "zslab", version, about = "Sketch/photo retrieval lab with prompt-tuned toy transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON config merged over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dot-path override, e.g. `--set loss.lambda3=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Zs,
    Fg,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> TrainMode {
        match m {
            ModeArg::Zs => TrainMode::Zs,
            ModeArg::Fg => TrainMode::Fg,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset file.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train prompts and LayerNorm parameters.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
        #[arg(long)]
        lambda3: Option<f64>,
        #[arg(long)]
        lambda4: Option<f64>,
        /// Dataset file; regenerated from the config when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from `<out_dir>/checkpoint.zslab`.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed epochs.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Evaluate on the unseen categories; prints a JSON report.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, conflicts_with = "embeddings")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Defaults to the training mode of the config.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// `seen-categories 2,4,6`: retrain and evaluate once per seen-category count.
        #[arg(long, num_args = 2, value_names = ["AXIS", "VALUES"])]
        sweep: Option<Vec<String>>,
        /// Work directory for sweep runs.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Rank a gallery for one query item.
    Retrieve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, conflicts_with = "embeddings")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        query: u32,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        /// zs: all photos; fg: photos of the query's category.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Compare analytic and finite-difference gradients of the losses.
    Gradcheck {
        /// Loss name or `all`.
        #[arg(default_value = "all")]
        loss: String,
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Write one feature per dataset item to an embedding file.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse the process arguments with the config key listing in `--help`.
pub fn parse() -> Cli {
    let keys = key_listing();
    let cmd = Cli::command()
        .after_long_help(keys.clone())
        .after_help("Run with --help for the config key listing.")
        .mut_subcommands(|c| c.after_long_help(keys.clone()));
    let matches = cmd.get_matches();
    Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit())
}

fn resolve(cfg: &ConfigArgs, extra: Vec<String>) -> Result<RunConfig> {
    let mut sets = cfg.sets.clone();
    sets.extend(extra);
    ConfigSource::from_env(cfg.config.clone(), sets)?.resolve()
}

/// Execute a command, writing results to `out`. Returns the exit code.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::GenData { cfg, out: path } => {
            let config = resolve(&cfg, Vec::new())?;
            let d = generate_dataset(&config.dataset)?;
            save_dataset(&d, &path)?;
            let counts = serde_json::json!({
                "categories": d.categories().len(),
                "items": d.items().len(),
                "photos": d.count(Modality::Photo),
                "sketches": d.count(Modality::Sketch),
                "config_hash": config.hash(),
                "path": path.display().to_string(),
            });
            emit(out, &canonical_json(&counts))?;
            Ok(0)
        }
        Command::Train { cfg, mode, lambda1, lambda2, lambda3, lambda4, dataset, out_dir, resume, max_epochs } => {
            let mut extra = Vec::new();
            if let Some(m) = mode {
                extra.push(format!("train.mode={}", if m == ModeArg::Zs { "zs" } else { "fg" }));
            }
            for (k, v) in [("lambda1", lambda1), ("lambda2", lambda2), ("lambda3", lambda3), ("lambda4", lambda4)] {
                if let Some(v) = v {
                    extra.push(format!("loss.{}={}", k, v));
                }
            }
            let config = resolve(&cfg, extra)?;
            let prepared = prepare(&config, dataset.as_deref())?;
            let t0 = Instant::now();
            let outcome = driver::train(&config, &prepared, &out_dir, &TrainOptions { resume, stop_after: max_epochs })?;
            let summary = serde_json::json!({
                "checkpoint": out_dir.join(CHECKPOINT_FILE).display().to_string(),
                "completed_epochs": outcome.completed_epochs,
                "config_hash": config.hash(),
                "final_epoch": outcome.epochs.last(),
                "frozen_digest": outcome.encoder.store().frozen_digest(),
                "wall_s": t0.elapsed().as_secs_f64(),
            });
            emit(out, &canonical_json(&summary))?;
            Ok(0)
        }
        Command::Eval { cfg, checkpoint, embeddings, dataset, mode, out: out_path, sweep, out_dir } => {
            if let Some(sweep) = sweep {
                let config = resolve(&cfg, Vec::new())?;
                let json = run_sweep(&config, &sweep, dataset.as_deref(), mode.map(Into::into), out_dir.as_deref())?;
                if let Some(p) = &out_path {
                    write_file(p, json.as_bytes())?;
                }
                emit(out, &json)?;
                return Ok(0);
            }
            let (config, prepared, features) = load_features(&cfg, checkpoint.as_deref(), embeddings.as_deref(), dataset.as_deref(), true)?;
            let mode = mode.map(Into::into).unwrap_or(config.train.mode);
            let report = evaluate_features(&config, &prepared.dataset, &prepared.unseen_pool, &features, mode)?;
            let json = report_json(&report);
            if let Some(p) = &out_path {
                write_file(p, json.as_bytes())?;
            }
            emit(out, &json)?;
            Ok(0)
        }
        Command::Retrieve { cfg, checkpoint, embeddings, dataset, query, top_k, mode } => {
            let (config, prepared, features) = load_features(&cfg, checkpoint.as_deref(), embeddings.as_deref(), dataset.as_deref(), false)?;
            let mode = mode.map(Into::into).unwrap_or(config.train.mode);
            let json = retrieve(&config, &prepared, &features, query, top_k, mode)?;
            emit(out, &json)?;
            Ok(0)
        }
        Command::Gradcheck { loss, points, seed, tolerance } => {
            let names: Vec<&str> = if loss == "all" {
                SUITE.to_vec()
            } else if let Some(n) = SUITE.iter().find(|n| **n == loss) {
                vec![*n]
            } else {
                return Err(LabError::Config(format!("unknown loss `{}`; expected one of {} or all", loss, SUITE.join(", "))));
            };
            let mut failed = false;
            writeln!(out, "{:<16} {:>6} {:>14} {:>8}  status", "loss", "points", "max_rel_error", "redraws").map_err(stdout_err)?;
            for name in names {
                let row = run_named(name, points, seed, 1e-6, tolerance)?;
                failed |= !row.passed;
                writeln!(
                    out,
                    "{:<16} {:>6} {:>14.3e} {:>8}  {}",
                    row.name,
                    row.points,
                    row.max_rel_error,
                    row.redraws,
                    if row.passed { "PASS" } else { "FAIL" }
                )
                .map_err(stdout_err)?;
            }
            Ok(if failed { 1 } else { 0 })
        }
        Command::ExportEmbeddings { checkpoint, dataset, out: path } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let prepared = prepare(&ck.config, dataset.as_deref())?;
            let file = export_embeddings(&ck.encoder, &prepared.dataset)?;
            save_embeddings(&file, &path)?;
            let summary = serde_json::json!({"rows": file.rows.len(), "d": file.dim, "encoder_config_hash": file.encoder_config_hash});
            emit(out, &canonical_json(&summary))?;
            Ok(0)
        }
    }
}

fn stdout_err(e: std::io::Error) -> LabError {
    LabError::io("<stdout>", e)
}

fn emit(out: &mut dyn Write, s: &str) -> Result<()> {
    writeln!(out, "{}", s).map_err(stdout_err)
}

/// Config, prepared data and features from a checkpoint or an embedding
/// file. `unseen_only` restricts encoding to the unseen pool.
fn load_features(
    cfg: &ConfigArgs,
    checkpoint: Option<&Path>,
    embeddings: Option<&Path>,
    dataset: Option<&Path>,
    unseen_only: bool,
) -> Result<(RunConfig, Prepared, Features)> {
    match (checkpoint, embeddings) {
        (Some(ck), None) => {
            let ck = Checkpoint::load(ck)?;
            let mut config = ck.config.clone();
            if !cfg.sets.is_empty() || cfg.config.is_some() {
                config = overlay(&config, cfg)?;
            }
            let prepared = prepare(&config, dataset)?;
            let features = if unseen_only {
                zslab_core::metrics::encode_pool(&ck.encoder, &prepared.dataset, &prepared.unseen_pool)?
            } else {
                let ids: Vec<u32> = prepared.dataset.items().iter().map(|it| it.id).collect();
                zslab_core::metrics::encode_items(&ck.encoder, &prepared.dataset, &ids)?
            };
            Ok((config, prepared, features))
        }
        (None, Some(path)) => {
            let config = resolve(cfg, Vec::new())?;
            let prepared = prepare(&config, dataset)?;
            let file: EmbeddingFile = load_embeddings(path)?;
            file.check_against(&prepared.dataset)?;
            Ok((config, prepared, file.features()))
        }
        _ => Err(LabError::Config("give exactly one of --checkpoint or --embeddings".into())),
    }
}

/// Apply `--config`/`--set` on top of a checkpoint's config.
fn overlay(base: &RunConfig, cfg: &ConfigArgs) -> Result<RunConfig> {
    let mut user = serde_json::to_value(base).expect("serializable");
    if let Some(p) = &cfg.config {
        let raw = crate::format::read_file(p)?;
        let layer: serde_json::Value =
            serde_json::from_slice(&raw).map_err(|e| LabError::Config(format!("{}: {}", p.display(), e)))?;
        merge_into(&mut user, layer);
    }
    for s in &cfg.sets {
        crate::config::apply_set(&mut user, s)?;
    }
    crate::config::resolve_value(user, None)
}

fn merge_into(base: &mut serde_json::Value, layer: serde_json::Value) {
    match (base, layer) {
        (serde_json::Value::Object(b), serde_json::Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_into(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}

#[derive(Serialize)]
struct Hit {
    rank: usize,
    id: u32,
    category: u32,
    instance: u32,
    distance: f64,
}

#[derive(Serialize)]
struct Retrieval {
    query: u32,
    mode: &'static str,
    gallery: usize,
    config_hash: String,
    results: Vec<Hit>,
}

pub fn retrieve(config: &RunConfig, prepared: &Prepared, features: &Features, query: u32, top_k: usize, mode: TrainMode) -> Result<String> {
    let d = &prepared.dataset;
    let q = d.item(query).ok_or_else(|| LabError::Config(format!("unknown query item {}", query)))?;
    let qf = features.get(&query).ok_or_else(|| LabError::Config(format!("no feature for item {}", query)))?;
    let gallery: Vec<(u32, &[f64])> = d
        .items()
        .iter()
        .filter(|it| it.modality == Modality::Photo && it.id != query)
        .filter(|it| mode == TrainMode::Zs || it.category == q.category)
        .filter_map(|it| features.get(&it.id).map(|f| (it.id, f.as_slice())))
        .collect();
    let ranked = rank_gallery(query, qf, &gallery)?;
    let results = ranked
        .ids
        .iter()
        .zip(&ranked.distances)
        .take(top_k)
        .enumerate()
        .map(|(r, (&id, &distance))| {
            let it = d.item(id).expect("gallery item");
            Hit { rank: r + 1, id, category: it.category, instance: it.instance, distance }
        })
        .collect();
    let mode_name = if mode == TrainMode::Zs { "zs" } else { "fg" };
    Ok(canonical_json(&Retrieval { query, mode: mode_name, gallery: gallery.len(), config_hash: config.hash(), results }))
}

/// Retrain and evaluate once per seen-category count; returns a JSON array.
pub fn run_sweep(
    base: &RunConfig,
    sweep: &[String],
    dataset: Option<&Path>,
    mode: Option<TrainMode>,
    out_dir: Option<&Path>,
) -> Result<String> {
    if sweep.len() != 2 || sweep[0] != "seen-categories" {
        return Err(LabError::Config("--sweep expects `seen-categories N1,N2,...`".into()));
    }
    let sizes = sweep[1]
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| LabError::Config(format!("bad sweep value `{}`", s))))
        .collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::new();
    for n in sizes {
        let cats = base.dataset.num_categories;
        if n < 2 || n >= cats {
            return Err(LabError::Config(format!("seen-category count {} outside 2..{}", n, cats)));
        }
        let mut config = base.clone();
        config.split.unseen_count = cats - n;
        config.train.categories_per_batch = config.train.categories_per_batch.min(n);
        config.validate()?;
        let prepared = prepare(&config, dataset)?;
        let encoder = match out_dir {
            Some(dir) => {
                let sub = dir.join(format!("seen-{}", n));
                std::fs::create_dir_all(&sub).map_err(|e| LabError::io(&sub, e))?;
                driver::train(&config, &prepared, &sub, &TrainOptions::default())?.encoder
            }
            None => driver::train_in_memory(&config, &prepared)?,
        };
        let report = driver::evaluate_encoder(&config, &prepared, &encoder, mode.unwrap_or(config.train.mode))?;
        let mut v = serde_json::to_value(&report).expect("serializable");
        v["seen_categories"] = serde_json::Value::from(n);
        reports.push(v);
    }
    Ok(canonical_json(&reports))
}

/// Embedding file of a checkpoint for `dataset`.
pub fn embeddings_for(checkpoint: &Path, dataset: Option<&Path>) -> Result<EmbeddingFile> {
    let ck = Checkpoint::load(checkpoint)?;
    let prepared = prepare(&ck.config, dataset)?;
    export_embeddings(&ck.encoder, &prepared.dataset)
}
