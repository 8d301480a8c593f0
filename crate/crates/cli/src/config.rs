//! Experiment configuration: JSON file, `--set` overrides and validation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use lomt_core::{BackboneSpec, SceneConfig, TaskSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const OUT_ENV: &str = "LOMT_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    DenseStl,
    SparseStl,
    DenseMtl,
    Lomt,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExperimentKind::DenseStl => "dense-stl",
            ExperimentKind::SparseStl => "sparse-stl",
            ExperimentKind::DenseMtl => "dense-mtl",
            ExperimentKind::Lomt => "lomt",
        })
    }
}

/// A task given either by preset name or in full.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskEntry {
    Preset(String),
    Full(TaskSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Generate {
        #[serde(default)]
        scene: SceneConfig,
        #[serde(default)]
        seed: u64,
        n: usize,
    },
    Manifest(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_grid")]
    pub lambdas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lambdas: default_grid(),
        }
    }
}

fn default_grid() -> Vec<f64> {
    vec![1e-4, 2e-4, 5e-4, 1e-3]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub kind: ExperimentKind,
    pub backbone: BackboneSpec,
    pub tasks: Vec<TaskEntry>,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSource,
    #[serde(default = "default_root")]
    pub output_root: PathBuf,
    /// For `lomt`: phase-1 run directory per task.
    #[serde(default)]
    pub phase1_runs: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// For `report`: run directories to summarize.
    #[serde(default)]
    pub report_runs: Vec<PathBuf>,
}

fn default_root() -> PathBuf {
    PathBuf::from("runs")
}

/// Validation failure naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config field `{}`: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn bad(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.to_owned(),
        message: message.into(),
    }
}

/// Raw bytes plus the parsed, overridden config.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub path: PathBuf,
    pub raw: Vec<u8>,
    pub overrides: Vec<(String, String)>,
    pub config: ExperimentConfig,
}

impl LoadedConfig {
    /// Run directory: `<root>/<name>` with the root taken from `LOMT_OUT` when set.
    pub fn run_dir(&self) -> PathBuf {
        let root = std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.resolve(&self.config.output_root));
        root.join(&self.config.name)
    }

    /// Paths inside the config are relative to the config file.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.path.parent().unwrap_or_else(|| Path::new(".")).join(p)
        }
    }

    pub fn tasks(&self) -> anyhow::Result<Vec<TaskSpec>> {
        resolve_tasks(&self.config.tasks)
    }
}

pub fn resolve_tasks(entries: &[TaskEntry]) -> anyhow::Result<Vec<TaskSpec>> {
    entries
        .iter()
        .enumerate()
        .map(|(i, t)| match t {
            TaskEntry::Preset(name) => TaskSpec::by_name(name)
                .map_err(|_| bad(&format!("tasks[{i}]"), format!("unknown task preset `{name}`")).into()),
            TaskEntry::Full(spec) => {
                spec.validate().map_err(|e| bad(&format!("tasks[{i}]"), e.to_string()))?;
                Ok(spec.clone())
            }
        })
        .collect()
}

/// Sets `a.b.c` in a JSON tree; the value parses as JSON or falls back to a string.
pub fn apply_override(root: &mut Value, key: &str, value: &str) -> Result<(), ConfigError> {
    let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_owned()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad(key, "empty path segment"));
    }
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert((*part).to_owned(), parsed);
                    return Ok(());
                }
                map.entry(*part).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| bad(key, format!("`{part}` is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| bad(key, format!("index {idx} out of range ({len} items)")))?;
                if last {
                    *slot = parsed;
                    return Ok(());
                }
                slot
            }
            _ => return Err(bad(key, format!("`{part}` is below a scalar value"))),
        };
    }
    unreachable!("loop returns on the last segment")
}

pub fn parse_set(arg: &str) -> Result<(String, String), ConfigError> {
    arg.split_once('=')
        .map(|(k, v)| (k.trim().to_owned(), v.to_owned()))
        .ok_or_else(|| bad(arg, "expected key=value"))
}

/// Reads, overrides and validates a config. `seeds` (if non-empty) replaces `train.seeds`.
pub fn load(path: &Path, overrides: &[(String, String)], seeds: &[u64]) -> anyhow::Result<LoadedConfig> {
    let raw = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut tree: Value = serde_json::from_slice(&raw).map_err(|e| bad("<root>", e.to_string()))?;
    for (k, v) in overrides {
        apply_override(&mut tree, k, v)?;
    }
    if !seeds.is_empty() {
        apply_override(&mut tree, "train.seeds", &serde_json::to_string(seeds)?)?;
    }
    let config: ExperimentConfig = serde_json::from_value(tree).map_err(|e| bad(&schema_field(&e), e.to_string()))?;
    let loaded = LoadedConfig {
        path: path.to_owned(),
        raw,
        overrides: overrides.to_vec(),
        config,
    };
    validate(&loaded)?;
    Ok(loaded)
}

/// Best-effort field name from a serde message such as "missing field `kind`".
fn schema_field(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    msg.split('`').nth(1).unwrap_or("<root>").to_owned()
}

pub fn validate(loaded: &LoadedConfig) -> Result<(), ConfigError> {
    let c = &loaded.config;
    let opt = &c.train.optimizer;
    if c.name.is_empty() || c.name.contains(['/', '\\']) || c.name == "." || c.name == ".." {
        return Err(bad("name", "must be a plain directory name"));
    }
    if !(opt.lambda >= 0.0) || !opt.lambda.is_finite() {
        return Err(bad("train.optimizer.lambda", format!("must be >= 0, got {}", opt.lambda)));
    }
    if !(opt.alpha > 0.0) || !opt.alpha.is_finite() {
        return Err(bad("train.optimizer.alpha", format!("must be > 0, got {}", opt.alpha)));
    }
    if !(0.0..1.0).contains(&opt.momentum) {
        return Err(bad("train.optimizer.momentum", "must lie in [0, 1)"));
    }
    if opt.batch_size == 0 {
        return Err(bad("train.optimizer.batch_size", "must be >= 1"));
    }
    if opt.epochs == 0 {
        return Err(bad("train.optimizer.epochs", "must be >= 1"));
    }
    if c.train.seeds.is_empty() {
        return Err(bad("train.seeds", "at least one seed is required"));
    }
    c.backbone
        .validate()
        .map_err(|e| bad("backbone", e.to_string()))?;
    if c.tasks.is_empty() {
        return Err(bad("tasks", "at least one task is required"));
    }
    let tasks = resolve_tasks(&c.tasks).map_err(|e| match e.downcast::<ConfigError>() {
        Ok(ce) => ce,
        Err(other) => bad("tasks", other.to_string()),
    })?;
    let mut names = std::collections::BTreeSet::new();
    for (i, t) in tasks.iter().enumerate() {
        if !names.insert(&t.name) {
            return Err(bad(&format!("tasks[{i}]"), format!("duplicate task `{}`", t.name)));
        }
    }
    match c.kind {
        ExperimentKind::SparseStl | ExperimentKind::DenseStl if tasks.len() != 1 => {
            return Err(bad("tasks", format!("{} trains exactly one task", c.kind)));
        }
        ExperimentKind::SparseStl if opt.lambda <= 0.0 => {
            return Err(bad("train.optimizer.lambda", "sparse-stl requires lambda > 0"));
        }
        ExperimentKind::DenseStl | ExperimentKind::DenseMtl | ExperimentKind::Lomt if opt.lambda != 0.0 => {
            return Err(bad(
                "train.optimizer.lambda",
                format!("{} trains without the sparsity penalty; lambda must be 0", c.kind),
            ));
        }
        ExperimentKind::Lomt => {
            for t in &tasks {
                if !c.phase1_runs.contains_key(&t.name) {
                    return Err(bad(
                        "phase1_runs",
                        format!("no phase-1 run directory for task `{}`", t.name),
                    ));
                }
            }
        }
        _ => {}
    }
    if let DataSource::Generate { scene, n, .. } = &c.data {
        scene.validate().map_err(|e| bad("data.generate.scene", e.to_string()))?;
        if *n == 0 {
            return Err(bad("data.generate.n", "must be >= 1"));
        }
        if scene.channels != c.backbone.input_channels {
            return Err(bad(
                "backbone.input_channels",
                format!("scene has {} channels", scene.channels),
            ));
        }
    }
    if c.sweep.lambdas.iter().any(|l| !(*l > 0.0)) {
        return Err(bad("sweep.lambdas", "every lambda must be > 0"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_walk_objects_and_arrays() {
        let mut v = json!({"train": {"optimizer": {"lambda": 0.001}}, "tasks": ["edge"]});
        apply_override(&mut v, "train.optimizer.lambda", "0.5").unwrap();
        apply_override(&mut v, "tasks.0", "distance").unwrap();
        apply_override(&mut v, "new.deep.key", "true").unwrap();
        assert_eq!(v["train"]["optimizer"]["lambda"], json!(0.5));
        assert_eq!(v["tasks"][0], json!("distance"));
        assert_eq!(v["new"]["deep"]["key"], json!(true));
        assert!(apply_override(&mut v, "tasks.7", "x").is_err());
        assert!(apply_override(&mut v, "train.optimizer.lambda.x", "1").is_err());
        assert!(parse_set("novalue").is_err());
    }
}
