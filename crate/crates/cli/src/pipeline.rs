//! Subcommand implementations. Every artifact is a pure function of the
//! config and seed, so re-running a step rewrites identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lomt_core::analysis::{compression_ratio, last_active_layer, render_pattern, CompressionReport};
use lomt_core::data::{export_dataset, generate_dataset, load_manifest, Dataset, Split};
use lomt_core::model::{build_backbone, plan_lomt, ModelGraph};
use lomt_core::train::{
    build_mtl_model, dense_taps, evaluate_split, train_phase1, train_phase2, write_history, TaskMetric, TaskSpec,
};
use lomt_core::{SparsityPattern, TapSelection};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, DataSource, ExperimentKind, LoadedConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    GenData,
    TrainStl,
    Analyze,
    PlanLomt,
    TrainMtl,
    Sweep,
    Report,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterCounts {
    /// Backbone plus heads of the trained model.
    pub total: usize,
    pub backbone: usize,
    pub backbone_nonzero: usize,
    /// Backbone size before any truncation.
    pub full_backbone: usize,
}

/// Contents of `seed-N/metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: String,
    pub kind: ExperimentKind,
    pub seed: u64,
    pub lambda: f64,
    pub split: Split,
    pub tasks: BTreeMap<String, TaskMetric>,
    pub parameters: ParameterCounts,
    pub percent_sparsity: f64,
    pub taps: BTreeMap<String, usize>,
    pub equivalent_to_dense_mtl: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedTaps {
    pub seed: u64,
    pub taps: BTreeMap<String, usize>,
    pub deepest: usize,
    pub equivalent_to_dense_mtl: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub model: ModelGraph,
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed-{seed}"))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Creates the run directory and snapshots the config bytes verbatim.
fn prepare_run_dir(loaded: &LoadedConfig) -> Result<PathBuf> {
    let dir = loaded.run_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.json"), &loaded.raw)?;
    let overrides = dir.join("overrides.json");
    if loaded.overrides.is_empty() {
        if overrides.exists() {
            std::fs::remove_file(&overrides)?;
        }
    } else {
        let map: BTreeMap<&str, &str> = loaded.overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        write_json(&overrides, &map)?;
    }
    let stale = dir.join("error.json");
    if stale.exists() {
        std::fs::remove_file(stale)?;
    }
    Ok(dir)
}

pub fn load_dataset(loaded: &LoadedConfig) -> Result<Dataset> {
    let data = match &loaded.config.data {
        DataSource::Generate { scene, seed, n } => generate_dataset(scene, *seed, *n)?,
        DataSource::Manifest(path) => {
            let path = loaded.resolve(path);
            load_manifest(&path).with_context(|| format!("loading manifest {}", path.display()))?
        }
    };
    for w in &data.warnings {
        eprintln!("warning: {w}");
    }
    Ok(data)
}

/// Runs one subcommand and returns the directory it wrote.
pub fn run(step: Step, loaded: &LoadedConfig) -> Result<PathBuf> {
    match step {
        Step::GenData => gen_data(loaded),
        Step::TrainStl => train_stl(loaded),
        Step::Analyze => analyze(loaded),
        Step::PlanLomt => plan(loaded),
        Step::TrainMtl => train_mtl(loaded),
        Step::Sweep => sweep(loaded),
        Step::Report => {
            let dir = prepare_run_dir(loaded)?;
            let runs: Vec<PathBuf> = loaded.config.report_runs.iter().map(|p| loaded.resolve(p)).collect();
            if runs.is_empty() {
                return Err(ConfigError {
                    field: "report_runs".into(),
                    message: "no run directories to report on".into(),
                }
                .into());
            }
            crate::report::emit_report(&runs, &dir)?;
            Ok(dir)
        }
    }
}

fn gen_data(loaded: &LoadedConfig) -> Result<PathBuf> {
    if !matches!(loaded.config.data, DataSource::Generate { .. }) {
        return Err(ConfigError {
            field: "data".into(),
            message: "gen-data needs a `generate` data source".into(),
        }
        .into());
    }
    let dir = prepare_run_dir(loaded)?;
    let data = load_dataset(loaded)?;
    let manifest = export_dataset(&data, &dir.join("data"))?;
    println!("{}", manifest.display());
    Ok(dir)
}

fn require_kind(loaded: &LoadedConfig, allowed: &[ExperimentKind], step: &str) -> Result<()> {
    if allowed.contains(&loaded.config.kind) {
        return Ok(());
    }
    Err(ConfigError {
        field: "kind".into(),
        message: format!("{step} cannot run a {} experiment", loaded.config.kind),
    }
    .into())
}

fn full_backbone_count(loaded: &LoadedConfig) -> Result<usize> {
    Ok(build_backbone(&loaded.config.backbone, 0)?.parameter_count())
}

fn counts(model: &ModelGraph, full_backbone: usize) -> ParameterCounts {
    ParameterCounts {
        total: model.parameter_count(),
        backbone: model.backbone_parameter_count(),
        backbone_nonzero: model.backbone_nonzero_count(),
        full_backbone,
    }
}

/// Phase-1 training of one seed into `dir`.
fn stl_seed(loaded: &LoadedConfig, data: &Dataset, task: &TaskSpec, lambda: f64, seed: u64, dir: &Path) -> Result<RunMetrics> {
    let mut cfg = loaded.config.train.with_seed(seed);
    cfg.optimizer.lambda = lambda;
    let out = train_phase1(&loaded.config.backbone, task, data, &cfg)?;
    std::fs::create_dir_all(dir)?;
    write_history(&dir.join("history.jsonl"), &out.history)?;
    write_json(&dir.join("pattern.json"), &out.pattern)?;
    let rendered = render_pattern(std::slice::from_ref(&out.pattern))?;
    write_text(&dir.join("pattern.csv"), &rendered.csv)?;
    write_text(&dir.join("pattern.svg"), &rendered.svg)?;
    let report = evaluate_split(&out.model, std::slice::from_ref(task), data, eval_split(data), cfg.optimizer.batch_size, seed)?;
    let metrics = RunMetrics {
        run: loaded.config.name.clone(),
        kind: loaded.config.kind,
        seed,
        lambda,
        split: report.split,
        tasks: report.tasks,
        parameters: counts(&out.model, full_backbone_count(loaded)?),
        percent_sparsity: out.final_sparsity(),
        taps: out.model.taps().taps,
        equivalent_to_dense_mtl: false,
    };
    write_json(&dir.join("metrics.json"), &metrics)?;
    write_json(&dir.join("checkpoint.json"), &Checkpoint { seed, model: out.model })?;
    Ok(metrics)
}

fn eval_split(data: &Dataset) -> Split {
    if data.indices(Split::Val).is_empty() {
        Split::Train
    } else {
        Split::Val
    }
}

fn train_stl(loaded: &LoadedConfig) -> Result<PathBuf> {
    require_kind(loaded, &[ExperimentKind::DenseStl, ExperimentKind::SparseStl], "train-stl")?;
    let dir = prepare_run_dir(loaded)?;
    let data = load_dataset(loaded)?;
    let task = &loaded.tasks()?[0];
    let lambda = loaded.config.train.optimizer.lambda;
    for &seed in &loaded.config.train.seeds {
        let m = stl_seed(loaded, &data, task, lambda, seed, &seed_dir(&dir, seed))?;
        eprintln!("seed {seed}: sparsity {:.2}%", m.percent_sparsity);
    }
    Ok(dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAnalysis {
    pub seed: u64,
    pub task: String,
    pub lambda: f64,
    /// Absent when every layer is fully zero.
    pub last_active_layer: Option<usize>,
    pub percent_sparsity: f64,
    pub compression: CompressionReport,
}

fn analyze(loaded: &LoadedConfig) -> Result<PathBuf> {
    require_kind(loaded, &[ExperimentKind::DenseStl, ExperimentKind::SparseStl], "analyze")?;
    let dir = loaded.run_dir();
    let mut csv = String::from("seed,task,lambda,last_active_layer,percent_sparsity,total_parameters,nonzero_parameters,compression_ratio\n");
    let mut rows = Vec::new();
    for &seed in &loaded.config.train.seeds {
        let sd = seed_dir(&dir, seed);
        let pattern: SparsityPattern = read_json(&sd.join("pattern.json")).context("analyze needs a completed train-stl run")?;
        let metrics: RunMetrics = read_json(&sd.join("metrics.json"))?;
        let tap = match last_active_layer(&pattern) {
            Ok(t) => Some(t),
            Err(lomt_core::Error::AllZeroPattern) => {
                eprintln!("warning: seed {seed}: every layer of `{}` is zero", pattern.task_name);
                None
            }
            Err(e) => return Err(e.into()),
        };
        let p = &metrics.parameters;
        let cr = compression_ratio(p.full_backbone as f64, p.backbone_nonzero.max(1) as f64)?;
        let a = SeedAnalysis {
            seed,
            task: pattern.task_name.clone(),
            lambda: pattern.lambda,
            last_active_layer: tap,
            percent_sparsity: metrics.percent_sparsity,
            compression: cr,
        };
        writeln!(
            csv,
            "{},{},{},{},{:.6},{},{},{}",
            seed,
            a.task,
            a.lambda,
            tap.map(|t| t.to_string()).unwrap_or_default(),
            a.percent_sparsity,
            p.full_backbone,
            p.backbone_nonzero,
            cr.formatted()
        )?;
        write_json(&sd.join("analysis.json"), &a)?;
        let mut labelled = pattern.clone();
        labelled.task_name = format!("{} seed {seed}", pattern.task_name);
        rows.push(labelled);
    }
    write_text(&dir.join("analysis.csv"), &csv)?;
    let grid = render_pattern(&rows)?;
    write_text(&dir.join("sparsity_grid.csv"), &grid.csv)?;
    write_text(&dir.join("sparsity_grid.svg"), &grid.svg)?;
    Ok(dir)
}

/// Per-seed taps from the phase-1 patterns only (checkpoints are never read).
fn plan_seed(loaded: &LoadedConfig, tasks: &[TaskSpec], seed: u64) -> Result<SeedTaps> {
    let mut patterns = BTreeMap::new();
    for t in tasks {
        let run = loaded.resolve(&loaded.config.phase1_runs[&t.name]);
        let path = seed_dir(&run, seed).join("pattern.json");
        if !path.exists() {
            return Err(ConfigError {
                field: format!("phase1_runs.{}", t.name),
                message: format!("missing phase-1 artifact {}", path.display()),
            }
            .into());
        }
        let mut p: SparsityPattern = read_json(&path)?;
        p.task_name = t.name.clone();
        patterns.insert(t.name.clone(), p);
    }
    let sel: TapSelection = plan_lomt(&patterns)?;
    let depth = loaded.config.backbone.depth();
    let deepest = sel.deepest().unwrap_or(0);
    Ok(SeedTaps {
        seed,
        equivalent_to_dense_mtl: sel.taps.values().all(|&t| t + 1 == depth),
        taps: sel.taps,
        deepest,
    })
}

fn modal(values: &[usize]) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &v in values {
        *counts.entry(v).or_default() += 1;
    }
    // ties go to the shallower layer
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(v, _)| v)
}

fn write_plan(loaded: &LoadedConfig, dir: &Path) -> Result<Vec<SeedTaps>> {
    let tasks = loaded.tasks()?;
    let mut all = Vec::new();
    for &seed in &loaded.config.train.seeds {
        let taps = plan_seed(loaded, &tasks, seed)?;
        let sd = seed_dir(dir, seed);
        std::fs::create_dir_all(&sd)?;
        write_json(&sd.join("taps.json"), &taps)?;
        all.push(taps);
    }
    let summary: BTreeMap<String, serde_json::Value> = tasks
        .iter()
        .map(|t| {
            let per_seed: BTreeMap<String, usize> = all.iter().map(|s| (s.seed.to_string(), s.taps[&t.name])).collect();
            let values: Vec<usize> = per_seed.values().copied().collect();
            (
                t.name.clone(),
                serde_json::json!({ "per_seed": per_seed, "modal": modal(&values) }),
            )
        })
        .collect();
    write_json(&dir.join("taps.json"), &summary)?;
    Ok(all)
}

fn plan(loaded: &LoadedConfig) -> Result<PathBuf> {
    require_kind(loaded, &[ExperimentKind::Lomt], "plan-lomt")?;
    let dir = prepare_run_dir(loaded)?;
    for s in write_plan(loaded, &dir)? {
        let flag = if s.equivalent_to_dense_mtl { " (equivalent-to-dense-mtl)" } else { "" };
        eprintln!("seed {}: taps {:?}{flag}", s.seed, s.taps);
    }
    Ok(dir)
}

fn train_mtl(loaded: &LoadedConfig) -> Result<PathBuf> {
    require_kind(loaded, &[ExperimentKind::DenseMtl, ExperimentKind::Lomt], "train-mtl")?;
    let dir = prepare_run_dir(loaded)?;
    let tasks = loaded.tasks()?;
    let backbone = &loaded.config.backbone;
    let plans: Vec<SeedTaps> = match loaded.config.kind {
        ExperimentKind::Lomt => write_plan(loaded, &dir)?,
        _ => loaded
            .config
            .train
            .seeds
            .iter()
            .map(|&seed| SeedTaps {
                seed,
                taps: dense_taps(backbone, &tasks).taps,
                deepest: backbone.depth() - 1,
                equivalent_to_dense_mtl: true,
            })
            .collect(),
    };
    let data = load_dataset(loaded)?;
    let full = full_backbone_count(loaded)?;
    for plan in plans {
        let seed = plan.seed;
        let cfg = loaded.config.train.with_seed(seed);
        let model = build_mtl_model(backbone, &tasks, &TapSelection { taps: plan.taps.clone() }, seed)?;
        let out = train_phase2(model, &tasks, &data, &cfg)?;
        let sd = seed_dir(&dir, seed);
        std::fs::create_dir_all(&sd)?;
        write_history(&sd.join("history.jsonl"), &out.history)?;
        let metrics = RunMetrics {
            run: loaded.config.name.clone(),
            kind: loaded.config.kind,
            seed,
            lambda: 0.0,
            split: out.report.split,
            tasks: out.report.tasks.clone(),
            parameters: counts(&out.model, full),
            percent_sparsity: out.history.last().map_or(0.0, |r| r.percent_sparsity),
            taps: plan.taps,
            equivalent_to_dense_mtl: plan.equivalent_to_dense_mtl,
        };
        write_json(&sd.join("metrics.json"), &metrics)?;
        write_json(&sd.join("checkpoint.json"), &Checkpoint { seed, model: out.model })?;
        eprintln!("seed {seed}: {:?}", metrics.tasks.iter().map(|(t, m)| (t, m.value)).collect::<Vec<_>>());
    }
    Ok(dir)
}

/// Directory name for one grid point, e.g. `lambda-1e-3`.
pub fn lambda_dir_name(lambda: f64) -> String {
    format!("lambda-{lambda:e}")
}

fn sweep(loaded: &LoadedConfig) -> Result<PathBuf> {
    require_kind(loaded, &[ExperimentKind::SparseStl], "sweep")?;
    let dir = prepare_run_dir(loaded)?;
    let data = load_dataset(loaded)?;
    let task = &loaded.tasks()?[0];
    if loaded.config.sweep.lambdas.is_empty() {
        bail!(ConfigError {
            field: "sweep.lambdas".into(),
            message: "empty grid".into()
        });
    }
    let mut csv = String::from("lambda,seed,percent_sparsity,last_active_layer\n");
    for &lambda in &loaded.config.sweep.lambdas {
        let ldir = dir.join(lambda_dir_name(lambda));
        for &seed in &loaded.config.train.seeds {
            let sd = seed_dir(&ldir, seed);
            let m = stl_seed(loaded, &data, task, lambda, seed, &sd)?;
            let pattern: SparsityPattern = read_json(&sd.join("pattern.json"))?;
            let tap = last_active_layer(&pattern).map(|t| t.to_string()).unwrap_or_default();
            writeln!(csv, "{lambda},{seed},{:.6},{tap}", m.percent_sparsity)?;
        }
    }
    write_text(&dir.join("sparsity_vs_lambda.csv"), &csv)?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modal_prefers_shallow_on_ties() {
        assert_eq!(modal(&[3, 1, 3]), Some(3));
        assert_eq!(modal(&[4, 2]), Some(2));
        assert_eq!(modal(&[]), None);
    }

    #[test]
    fn lambda_names() {
        assert_eq!(lambda_dir_name(1e-3), "lambda-1e-3");
        assert_eq!(lambda_dir_name(2e-4), "lambda-2e-4");
    }
}
