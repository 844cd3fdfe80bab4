//! Run configuration: one JSON document merged over the defaults, with
//! dot-path overrides.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use zslab_core::data::DatasetSpec;
use zslab_core::encoder::{EncoderConfig, EncoderMode};
use zslab_core::losses::LossWeights;
use zslab_core::metrics::EvalOptions;
use zslab_core::train::{StepConfig, TrainMode};

use crate::error::{LabError, Result};
use crate::format::{canonical_json, read_file, sha256_hex};

/// Environment variable that fills every seed the user left unset.
pub const SEED_ENV: &str = "ZSLAB_SEED";

/// Dot paths of all seeds.
pub const SEED_KEYS: [&str; 4] = ["dataset.seed", "split.seed", "train.model_seed", "train.sampler_seed"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub unseen_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    /// Triplets per step in zs mode.
    pub batch_size: usize,
    /// C: categories per hard batch (fg).
    pub categories_per_batch: usize,
    /// T: triplets per category (fg).
    pub triplets_per_category: usize,
    pub lr: f64,
    pub shuffle_grid: usize,
    /// Instances per seen category held out for the epoch probe.
    pub probe_instances: usize,
    pub checkpoint_every: usize,
    pub model_seed: u64,
    pub sampler_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: Option<String>,
    pub out_dir: Option<String>,
    pub class_embeddings: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub split: SplitConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub eval: EvalOptions,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSpec::default(),
            split: SplitConfig { unseen_count: 2, seed: 0 },
            encoder: EncoderConfig { mode: EncoderMode::Shared, ..EncoderConfig::default() },
            train: TrainConfig {
                mode: TrainMode::Fg,
                epochs: 30,
                batch_size: 16,
                categories_per_batch: 4,
                triplets_per_category: 4,
                lr: 1e-3,
                shuffle_grid: 2,
                probe_instances: 2,
                checkpoint_every: 5,
                model_seed: 0,
                sampler_seed: 0,
            },
            loss: LossWeights::default(),
            eval: EvalOptions::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Encoder layout used by each training mode unless set explicitly.
pub fn encoder_mode_for(mode: TrainMode) -> EncoderMode {
    match mode {
        TrainMode::Zs => EncoderMode::DualBranch,
        TrainMode::Fg => EncoderMode::Shared,
    }
}

fn mode_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Zs => "zs",
        TrainMode::Fg => "fg",
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.encoder.validate()?;
        self.loss.validate()?;
        let bad = |m: String| Err(LabError::Config(m));
        if self.encoder.image_size != self.dataset.image_size {
            return bad(format!(
                "encoder.image_size {} differs from dataset.image_size {}",
                self.encoder.image_size, self.dataset.image_size
            ));
        }
        let cats = self.dataset.num_categories;
        if self.split.unseen_count == 0 || self.split.unseen_count >= cats {
            return bad(format!("split.unseen_count must lie in 1..{}", cats));
        }
        let t = &self.train;
        if t.batch_size < 2 {
            return bad("train.batch_size must be at least 2".into());
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return bad("train.lr must be positive".into());
        }
        if t.shuffle_grid == 0 || self.dataset.image_size % t.shuffle_grid != 0 {
            return bad(format!("train.shuffle_grid {} must divide the image size", t.shuffle_grid));
        }
        if t.checkpoint_every == 0 {
            return bad("train.checkpoint_every must be positive".into());
        }
        let train_instances = self.dataset.instances_per_category.saturating_sub(t.probe_instances);
        if train_instances == 0 {
            return bad("train.probe_instances leaves no training instances".into());
        }
        if t.mode == TrainMode::Fg {
            if train_instances < 2 {
                return bad("fg mode needs at least 2 training instances per category".into());
            }
            let seen = cats - self.split.unseen_count;
            if t.categories_per_batch < 2 || t.categories_per_batch > seen {
                return bad(format!("train.categories_per_batch must lie in 2..={} (seen categories)", seen));
            }
            if t.triplets_per_category == 0 {
                return bad("train.triplets_per_category must be positive".into());
            }
        }
        if self.eval.map_k.contains(&0) || self.eval.p_k.contains(&0) || self.eval.acc_q.contains(&0) {
            return bad("evaluation cutoffs must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON with `paths` removed: file locations
    /// do not change results.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("serializable");
        v.as_object_mut().expect("object").remove("paths");
        sha256_hex(canonical_json(&v).as_bytes())
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("data".to_string(), self.dataset.seed),
            ("split".to_string(), self.split.seed),
            ("model".to_string(), self.train.model_seed),
            ("sampler".to_string(), self.train.sampler_seed),
        ])
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            mode: self.train.mode,
            batch_size: self.train.batch_size,
            categories_per_batch: self.train.categories_per_batch,
            triplets_per_category: self.train.triplets_per_category,
            shuffle_grid: self.train.shuffle_grid,
            weights: self.loss.clone(),
        }
    }

    /// Triplets drawn per step.
    pub fn step_triplets(&self) -> usize {
        match self.train.mode {
            TrainMode::Zs => self.train.batch_size,
            TrainMode::Fg => self.train.categories_per_batch * self.train.triplets_per_category,
        }
    }

    pub fn mode_name(&self) -> &'static str {
        mode_name(self.train.mode)
    }
}

/// Layers applied over the defaults, last wins.
#[derive(Debug, Clone, Default)]
pub struct ConfigSource {
    pub file: Option<std::path::PathBuf>,
    /// `a.b=value` overrides; the value is parsed as JSON, else taken as a string.
    pub sets: Vec<String>,
    /// Value of `ZSLAB_SEED`, if any.
    pub env_seed: Option<u64>,
}

impl ConfigSource {
    pub fn from_env(file: Option<std::path::PathBuf>, sets: Vec<String>) -> Result<Self> {
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(s) => Some(s.trim().parse::<u64>().map_err(|_| LabError::Config(format!("{}={} is not a u64", SEED_ENV, s)))?),
            Err(_) => None,
        };
        Ok(ConfigSource { file, sets, env_seed })
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let mut user = Value::Object(Map::new());
        if let Some(path) = &self.file {
            let raw = read_file(path)?;
            let v: Value = serde_json::from_slice(&raw)
                .map_err(|e| LabError::Config(format!("{}: {}", path.display(), e)))?;
            if !v.is_object() {
                return Err(LabError::Config(format!("{}: top level must be an object", path.display())));
            }
            merge(&mut user, v);
        }
        for s in &self.sets {
            apply_set(&mut user, s)?;
        }
        resolve_value(user, self.env_seed)
    }
}

/// Merge a user layer over the defaults, fill seeds and the encoder mode.
pub fn resolve_value(user: Value, env_seed: Option<u64>) -> Result<RunConfig> {
    let mut full = serde_json::to_value(RunConfig::default()).expect("serializable");
    let explicit_mode = lookup(&user, "encoder.mode").is_some();
    let unset_seeds: Vec<&str> = SEED_KEYS.iter().copied().filter(|k| lookup(&user, k).is_none()).collect();
    merge(&mut full, user);
    if let Some(seed) = env_seed {
        for k in unset_seeds {
            insert_path(&mut full, k, Value::from(seed))?;
        }
    }
    let mut cfg: RunConfig = serde_json::from_value(full).map_err(|e| LabError::Config(e.to_string()))?;
    if !explicit_mode {
        cfg.encoder.mode = encoder_mode_for(cfg.train.mode);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<RunConfig> {
    ConfigSource { file: Some(path.to_path_buf()), ..Default::default() }.resolve()
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}

fn lookup<'v>(v: &'v Value, path: &str) -> Option<&'v Value> {
    path.split('.').try_fold(v, |cur, k| cur.get(k))
}

fn insert_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(LabError::Config(format!("bad key `{}`", path)));
    }
    let mut cur = root;
    for k in &keys[..keys.len() - 1] {
        let obj = cur.as_object_mut().ok_or_else(|| LabError::Config(format!("`{}` crosses a non-object", path)))?;
        cur = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = cur.as_object_mut().ok_or_else(|| LabError::Config(format!("`{}` crosses a non-object", path)))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Apply one `a.b=value` override.
pub fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| LabError::Config(format!("override `{}` is not of the form key=value", assignment)))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    insert_path(root, key.trim(), value)
}

/// Defaults that differ from the toy defaults or pin a published value.
fn published_default(key: &str) -> Option<&'static str> {
    Some(match key {
        "loss.mu" => "0.3",
        "loss.lambda1" => "0.5",
        "loss.lambda2" => "0.5",
        "loss.lambda3" => "0.1",
        "loss.lambda4" => "1",
        "encoder.prompt_count" => "3",
        "train.shuffle_grid" => "2",
        "train.lr" => "1e-5",
        "train.batch_size" => "64",
        "train.epochs" => "60",
        _ => return None,
    })
}

/// Every config key with its default, for `--help`.
pub fn key_listing() -> String {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(m) => {
                for (k, v) in m {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{}.{}", prefix, k) };
                    walk(&p, v, out);
                }
            }
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let mut rows = Vec::new();
    walk("", &serde_json::to_value(RunConfig::default()).expect("serializable"), &mut rows);
    for extra in ["paths.dataset", "paths.out_dir", "paths.class_embeddings"] {
        if !rows.iter().any(|(k, _)| k == extra) {
            rows.push((extra.to_string(), "null".into()));
        }
    }
    rows.sort();
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (override with --set key=value):\n");
    for (k, d) in rows {
        let d = if k == "encoder.mode" { "derived from train.mode (zs: dual_branch, fg: shared)".to_string() } else { d };
        match published_default(&k) {
            Some(p) => s.push_str(&format!("  {:width$}  {}  (published: {})\n", k, d, p, width = width)),
            None => s.push_str(&format!("  {:width$}  {}\n", k, d, width = width)),
        }
    }
    s.push_str(&format!("Unset seeds ({}) take the value of {} when it is set.\n", SEED_KEYS.join(", "), SEED_ENV));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_sets(sets: &[&str], env: Option<u64>) -> Result<RunConfig> {
        ConfigSource { file: None, sets: sets.iter().map(|s| s.to_string()).collect(), env_seed: env }.resolve()
    }

    #[test]
    fn defaults_validate() {
        let c = from_sets(&[], None).unwrap();
        assert_eq!(c.encoder.mode, EncoderMode::Shared);
        assert_eq!(c.step_triplets(), 16);
    }

    #[test]
    fn mode_selects_encoder_unless_explicit() {
        let c = from_sets(&["train.mode=zs"], None).unwrap();
        assert_eq!(c.encoder.mode, EncoderMode::DualBranch);
        let c = from_sets(&["train.mode=zs", "encoder.mode=shared"], None).unwrap();
        assert_eq!(c.encoder.mode, EncoderMode::Shared);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(from_sets(&["loss.lambda9=1"], None).is_err());
        assert!(from_sets(&["nope=1"], None).is_err());
        assert!(from_sets(&["loss.lambda3=-1"], None).is_err());
        assert!(from_sets(&["encoder.image_size=16"], None).is_err());
        assert!(from_sets(&["lambda3"], None).is_err());
    }

    #[test]
    fn env_seed_fills_only_unset_seeds() {
        let c = from_sets(&["split.seed=9"], Some(4)).unwrap();
        assert_eq!(c.split.seed, 9);
        assert_eq!((c.dataset.seed, c.train.model_seed, c.train.sampler_seed), (4, 4, 4));
    }

    #[test]
    fn hash_ignores_paths() {
        let a = from_sets(&["paths.out_dir=a"], None).unwrap();
        let b = from_sets(&["paths.out_dir=b"], None).unwrap();
        let c = from_sets(&["loss.lambda3=0"], None).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn listing_covers_every_key() {
        let s = key_listing();
        for k in ["loss.lambda3", "train.sampler_seed", "encoder.prompt_count", "eval.map_k", "paths.dataset"] {
            assert!(s.contains(k), "{}", k);
        }
        assert!(s.contains("(published: 0.3)"));
    }
}
