//! Dataset preparation, the epoch loop with logging and checkpoints, and
//! evaluation.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use zslab_core::data::{generate_dataset, split_zero_shot, Dataset, SplitDescriptor};
use zslab_core::encoder::Encoder;
use zslab_core::losses::ClassEmbeddingTable;
use zslab_core::metrics::{
    category_delta_means, encode_pool, evaluate_fg, evaluate_zs, variance, Features, MetricsReport,
};
use zslab_core::optim::Adam;
use zslab_core::sampler::Pool;
use zslab_core::train::{train_step, TrainMode};

use crate::checkpoint::{Checkpoint, GuardState};
use crate::config::RunConfig;
use crate::error::{LabError, Result};
use crate::format::{load_class_table, load_dataset};

pub const CHECKPOINT_FILE: &str = "checkpoint.zslab";
pub const STEP_LOG: &str = "steps.jsonl";
pub const EPOCH_LOG: &str = "epochs.jsonl";

/// Epochs above `GUARD_FACTOR` times the initial loss before aborting.
pub const GUARD_EPOCHS: usize = 3;
pub const GUARD_FACTOR: f64 = 10.0;

/// Dataset, split and pools derived from a config.
pub struct Prepared {
    pub dataset: Dataset,
    pub split: SplitDescriptor,
    pub train_pool: Pool,
    pub probe_pool: Pool,
    pub unseen_pool: Pool,
    pub table: ClassEmbeddingTable,
}

/// Load the dataset from `dataset_path` (or `paths.dataset`), otherwise
/// regenerate it from the spec.
pub fn prepare(config: &RunConfig, dataset_path: Option<&Path>) -> Result<Prepared> {
    let path = dataset_path.map(Path::to_path_buf).or_else(|| config.paths.dataset.as_ref().map(PathBuf::from));
    let dataset = match path {
        Some(p) => {
            let d = load_dataset(&p)?;
            if *d.spec() != config.dataset {
                return Err(LabError::Config(format!("{} was generated from a different dataset spec", p.display())));
            }
            d
        }
        None => generate_dataset(&config.dataset)?,
    };
    prepare_with(config, dataset)
}

pub fn prepare_with(config: &RunConfig, dataset: Dataset) -> Result<Prepared> {
    let split = split_zero_shot(&dataset.categories(), config.split.unseen_count, config.split.seed)?;
    let (train_pool, probe_pool) = Pool::seen_with_probe(&dataset, &split, config.train.probe_instances);
    let unseen_pool = Pool::unseen(&dataset, &split);
    let table = match &config.paths.class_embeddings {
        Some(p) => load_class_table(Path::new(p), config.loss.temperature)?,
        None => ClassEmbeddingTable::pseudo(&split.seen, config.encoder.feature_dim, config.loss.temperature)?,
    };
    if table.dim() != config.encoder.feature_dim {
        return Err(LabError::Config(format!(
            "class embeddings have dimension {}, encoder emits {}",
            table.dim(),
            config.encoder.feature_dim
        )));
    }
    Ok(Prepared { dataset, split, train_pool, probe_pool, unseen_pool, table })
}

/// One line of the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub l_tri: f64,
    pub l_cls_s: f64,
    pub l_cls_p: f64,
    pub l_delta: f64,
    pub l_ps: f64,
    pub total: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub map_all: Option<f64>,
    pub acc_1: Option<f64>,
    pub acc_5: Option<f64>,
}

/// One line of the epoch log: mean terms and probe metrics on the held-out
/// seen instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub l_tri: f64,
    pub l_cls_s: f64,
    pub l_cls_p: f64,
    pub l_delta: f64,
    pub l_ps: f64,
    pub total: f64,
    pub probe: Option<ProbeMetrics>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: bool,
    /// Stop after this many completed epochs (simulates an interruption).
    pub stop_after: Option<usize>,
}

pub struct TrainOutcome {
    pub encoder: Encoder,
    pub epochs: Vec<EpochRecord>,
    pub completed_epochs: usize,
}

/// Steps per epoch: one pass worth of anchors over the training sketches.
pub fn steps_per_epoch(config: &RunConfig, prepared: &Prepared) -> usize {
    let sketches = prepared.train_pool.sketch_ids(&prepared.dataset).len();
    sketches.div_ceil(config.step_triplets()).max(1)
}

fn open_log(path: &Path, keep: impl Fn(&serde_json::Value) -> bool, resume: bool) -> Result<File> {
    let kept: Vec<String> = if resume && path.exists() {
        let f = File::open(path).map_err(|e| LabError::io(path, e))?;
        let mut out = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| LabError::io(path, e))?;
            if let Ok(v) = serde_json::from_str::<serde_json::Value>(&line) {
                if keep(&v) {
                    out.push(line);
                }
            }
        }
        out
    } else {
        Vec::new()
    };
    let mut f = OpenOptions::new().create(true).write(true).truncate(true).open(path).map_err(|e| LabError::io(path, e))?;
    for l in kept {
        writeln!(f, "{}", l).map_err(|e| LabError::io(path, e))?;
    }
    Ok(f)
}

fn write_line<T: Serialize>(f: &mut File, path: &Path, record: &T) -> Result<()> {
    writeln!(f, "{}", serde_json::to_string(record).expect("serializable")).map_err(|e| LabError::io(path, e))
}

pub fn probe_metrics(config: &RunConfig, prepared: &Prepared, encoder: &Encoder) -> Result<Option<ProbeMetrics>> {
    if prepared.probe_pool.categories().is_empty() {
        return Ok(None);
    }
    let features = encode_pool(encoder, &prepared.dataset, &prepared.probe_pool)?;
    let r = evaluate_features(config, &prepared.dataset, &prepared.probe_pool, &features, config.train.mode)?;
    Ok(Some(ProbeMetrics { map_all: r.map_all, acc_1: r.acc(1), acc_5: r.acc(5) }))
}

/// Run (or resume) training, writing logs and checkpoints under `out_dir`.
pub fn train(config: &RunConfig, prepared: &Prepared, out_dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    if !out_dir.is_dir() {
        return Err(LabError::io(out_dir, std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist")));
    }
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let (mut encoder, mut optimizer, mut epoch, mut step, mut guard) = if opts.resume && ckpt_path.exists() {
        let ck = Checkpoint::load(&ckpt_path)?;
        if ck.config.hash() != config.hash() {
            return Err(LabError::Config(format!("{} was written by a different config", ckpt_path.display())));
        }
        log::info!("resuming from epoch {} step {}", ck.epoch, ck.step);
        (ck.encoder, ck.optimizer, ck.epoch, ck.step, ck.guard)
    } else {
        let encoder = Encoder::build(config.encoder.clone(), config.train.model_seed)?;
        let optimizer = Adam::new(encoder.store(), config.train.lr);
        (encoder, optimizer, 0, 0, GuardState::default())
    };
    let step_path = out_dir.join(STEP_LOG);
    let epoch_path = out_dir.join(EPOCH_LOG);
    let mut step_log = open_log(&step_path, |v| v["step"].as_u64().is_some_and(|s| s < step), opts.resume)?;
    let mut epoch_log = open_log(&epoch_path, |v| v["epoch"].as_u64().is_some_and(|e| (e as usize) < epoch), opts.resume)?;

    let cfg = config.step_config();
    let per_epoch = steps_per_epoch(config, prepared);
    let mut records = Vec::new();
    let last = opts.stop_after.map_or(config.train.epochs, |s| s.min(config.train.epochs));
    while epoch < last {
        let mut sums = [0.0f64; 6];
        for _ in 0..per_epoch {
            let t0 = Instant::now();
            let out = train_step(
                &mut encoder,
                &mut optimizer,
                &prepared.dataset,
                &prepared.train_pool,
                &prepared.table,
                &cfg,
                config.train.sampler_seed,
                step,
            )?;
            let t = out.terms;
            let rec = StepRecord {
                step,
                epoch,
                l_tri: t.l_tri,
                l_cls_s: t.l_cls_s,
                l_cls_p: t.l_cls_p,
                l_delta: t.l_delta,
                l_ps: t.l_ps,
                total: t.total,
                wall_ms: t0.elapsed().as_millis() as u64,
            };
            write_line(&mut step_log, &step_path, &rec)?;
            for (s, v) in sums.iter_mut().zip([t.l_tri, t.l_cls_s, t.l_cls_p, t.l_delta, t.l_ps, t.total]) {
                *s += v;
            }
            if guard.initial_total.is_none() {
                guard.initial_total = Some(t.total);
            }
            step += 1;
        }
        let n = per_epoch as f64;
        let record = EpochRecord {
            epoch,
            steps: per_epoch,
            l_tri: sums[0] / n,
            l_cls_s: sums[1] / n,
            l_cls_p: sums[2] / n,
            l_delta: sums[3] / n,
            l_ps: sums[4] / n,
            total: sums[5] / n,
            probe: probe_metrics(config, prepared, &encoder)?,
        };
        write_line(&mut epoch_log, &epoch_path, &record)?;
        log::info!("epoch {} total {:.4}", epoch, record.total);
        let mean = record.total;
        records.push(record);
        epoch += 1;

        let init = guard.initial_total.unwrap_or(f64::INFINITY);
        if mean > GUARD_FACTOR * init || !mean.is_finite() {
            guard.consecutive_over += 1;
        } else {
            guard.consecutive_over = 0;
        }
        if guard.consecutive_over >= GUARD_EPOCHS {
            return Err(LabError::Divergence(format!(
                "epoch mean loss {:.4} above {}x the initial {:.4} for {} epochs",
                mean, GUARD_FACTOR, init, GUARD_EPOCHS
            )));
        }
        if epoch % config.train.checkpoint_every == 0 || epoch == config.train.epochs || epoch == last {
            let ck = Checkpoint { config: config.clone(), epoch, step, guard, encoder, optimizer };
            let bytes = ck.to_bytes();
            crate::format::write_file(&ckpt_path, &bytes)?;
            crate::format::write_file(&out_dir.join(format!("checkpoint-epoch{:03}.zslab", epoch)), &bytes)?;
            Checkpoint { encoder, optimizer, .. } = ck;
        }
    }
    Ok(TrainOutcome { encoder, epochs: records, completed_epochs: epoch })
}

/// Train without touching the file system.
pub fn train_in_memory(config: &RunConfig, prepared: &Prepared) -> Result<Encoder> {
    let mut encoder = Encoder::build(config.encoder.clone(), config.train.model_seed)?;
    let mut optimizer = Adam::new(encoder.store(), config.train.lr);
    let cfg = config.step_config();
    let per_epoch = steps_per_epoch(config, prepared);
    let mut step = 0u64;
    for _ in 0..config.train.epochs {
        for _ in 0..per_epoch {
            train_step(
                &mut encoder,
                &mut optimizer,
                &prepared.dataset,
                &prepared.train_pool,
                &prepared.table,
                &cfg,
                config.train.sampler_seed,
                step,
            )?;
            step += 1;
        }
    }
    Ok(encoder)
}

/// Metrics for `features` over `pool`, with provenance filled in.
pub fn evaluate_features(
    config: &RunConfig,
    dataset: &Dataset,
    pool: &Pool,
    features: &Features,
    mode: TrainMode,
) -> Result<MetricsReport> {
    let dim = features.values().next().map(Vec::len);
    if features.values().any(|f| Some(f.len()) != dim) {
        return Err(LabError::Config("feature dimensions differ".into()));
    }
    let mut report = match mode {
        TrainMode::Zs => evaluate_zs(dataset, pool, features, &config.eval)?,
        TrainMode::Fg => evaluate_fg(dataset, pool, features, &config.eval)?,
    };
    report.config_hash = config.hash();
    report.seeds = config.seeds();
    Ok(report)
}

/// Unseen-category evaluation of an encoder.
pub fn evaluate_encoder(config: &RunConfig, prepared: &Prepared, encoder: &Encoder, mode: TrainMode) -> Result<MetricsReport> {
    let features = encode_pool(encoder, &prepared.dataset, &prepared.unseen_pool)?;
    evaluate_features(config, &prepared.dataset, &prepared.unseen_pool, &features, mode)
}

/// Across-category variance of the mean relative distance over `pool`.
pub fn delta_variance(prepared: &Prepared, pool: &Pool, encoder: &Encoder) -> Result<f64> {
    let features = encode_pool(encoder, &prepared.dataset, pool)?;
    let means: Vec<f64> = category_delta_means(&prepared.dataset, pool, &features)?.into_values().collect();
    Ok(variance(&means))
}

pub fn report_json(report: &MetricsReport) -> String {
    crate::format::canonical_json(report)
}
