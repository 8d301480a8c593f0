//! Cross-run tables: metrics per task and experiment kind, parameter counts
//! with compression ratios, sparsity grids and the tap summary.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lomt_core::analysis::{compression_ratio, last_active_layer, render_pattern};
use lomt_core::train::{aggregate_runs, MetricReport, RunAggregate};
use lomt_core::SparsityPattern;

use crate::config::ExperimentKind;
use crate::pipeline::{read_json, write_json, RunMetrics};

struct RunData {
    name: String,
    kind: ExperimentKind,
    seeds: Vec<RunMetrics>,
    patterns: Vec<SparsityPattern>,
}

fn seed_dirs(run: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(run).with_context(|| format!("reading run directory {}", run.display()))?;
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name();
        let Some(seed) = name.to_str().and_then(|n| n.strip_prefix("seed-")).and_then(|s| s.parse().ok()) else {
            continue;
        };
        if entry.file_type()?.is_dir() {
            out.push((seed, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn load_run(run: &Path) -> Result<RunData> {
    let dirs = seed_dirs(run)?;
    if dirs.is_empty() {
        bail!("incomplete run directory {}: no seed-* results", run.display());
    }
    let mut seeds = Vec::new();
    let mut patterns = Vec::new();
    for (_, dir) in &dirs {
        let m: RunMetrics = read_json(&dir.join("metrics.json"))
            .with_context(|| format!("incomplete run directory {}", run.display()))?;
        let p = dir.join("pattern.json");
        if p.exists() {
            patterns.push(read_json(&p)?);
        }
        seeds.push(m);
    }
    let first = &seeds[0];
    Ok(RunData {
        name: first.run.clone(),
        kind: first.kind,
        patterns,
        seeds,
    })
}

fn aggregate(run: &RunData, warnings: &mut Vec<String>) -> Result<RunAggregate> {
    let reports: Vec<MetricReport> = run
        .seeds
        .iter()
        .map(|m| MetricReport {
            seed: m.seed,
            split: m.split,
            tasks: m.tasks.clone(),
        })
        .collect();
    if reports.len() == 1 {
        warnings.push(format!(
            "run `{}` has a single seed; std left empty",
            run.name
        ));
        return Ok(RunAggregate::single(&reports[0]));
    }
    Ok(aggregate_runs(&reports)?)
}

fn fmt_std(std: Option<f64>) -> String {
    std.map(|s| format!("{s:.6}")).unwrap_or_default()
}

/// Writes the report bundle for `runs` into `out`.
/// Per (task, metric): mean and std by experiment kind.
type Cells = BTreeMap<ExperimentKind, (f64, Option<f64>)>;

pub fn emit_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut warnings = Vec::new();
    let data = runs.iter().map(|r| load_run(r)).collect::<Result<Vec<_>>>()?;

    let mut long = String::from("task,metric,mean,std,seeds,kind,run\n");
    let mut wide: BTreeMap<(String, String), Cells> = BTreeMap::new();
    let mut kinds: Vec<ExperimentKind> = Vec::new();
    for run in &data {
        let agg = aggregate(run, &mut warnings)?;
        for row in &agg.rows {
            let seeds: Vec<String> = row.seeds.iter().map(|s| s.to_string()).collect();
            writeln!(
                long,
                "{},{},{:.6},{},{},{},{}",
                row.task,
                row.metric,
                row.mean,
                fmt_std(row.std),
                seeds.join(";"),
                run.kind,
                run.name
            )?;
            let cell = wide.entry((row.task.clone(), row.metric.to_string())).or_default();
            match cell.entry(run.kind) {
                Entry::Occupied(_) => warnings.push(format!(
                    "task `{}` appears in several {} runs; table keeps the first",
                    row.task, run.kind
                )),
                Entry::Vacant(v) => {
                    v.insert((row.mean, row.std));
                }
            }
        }
        if !kinds.contains(&run.kind) {
            kinds.push(run.kind);
        }
    }
    kinds.sort();
    std::fs::write(out.join("metrics.csv"), long)?;

    let mut table = String::from("task,metric");
    for k in &kinds {
        write!(table, ",{k} mean,{k} std")?;
    }
    table.push('\n');
    for ((task, metric), cells) in &wide {
        write!(table, "{task},{metric}")?;
        for k in &kinds {
            match cells.get(k) {
                Some((m, s)) => write!(table, ",{m:.6},{}", fmt_std(*s))?,
                None => table.push_str(",,"),
            }
        }
        table.push('\n');
    }
    std::fs::write(out.join("metrics_by_kind.csv"), table)?;

    let mut cr = String::from("run,kind,seed,total_parameters,nonzero_parameters,compression_ratio\n");
    for run in &data {
        for m in &run.seeds {
            let p = &m.parameters;
            let report = compression_ratio(p.full_backbone as f64, p.backbone_nonzero.max(1) as f64)?;
            writeln!(
                cr,
                "{},{},{},{},{},{}",
                run.name,
                run.kind,
                m.seed,
                p.full_backbone,
                p.backbone_nonzero,
                report.formatted()
            )?;
        }
    }
    std::fs::write(out.join("compression.csv"), cr)?;

    // taps per task per seed, from patterns for STL runs and plans for MTL runs
    let mut taps: BTreeMap<String, BTreeMap<String, BTreeMap<String, usize>>> = BTreeMap::new();
    for run in &data {
        if run.patterns.is_empty() {
            for m in &run.seeds {
                for (task, &tap) in &m.taps {
                    taps.entry(task.clone())
                        .or_default()
                        .entry(run.name.clone())
                        .or_default()
                        .insert(m.seed.to_string(), tap);
                }
            }
            continue;
        }
        for p in &run.patterns {
            match last_active_layer(p) {
                Ok(tap) => {
                    taps.entry(p.task_name.clone())
                        .or_default()
                        .entry(run.name.clone())
                        .or_default()
                        .insert(p.seed.to_string(), tap);
                }
                Err(_) => warnings.push(format!(
                    "run `{}` seed {}: every layer is zero, no tap",
                    run.name, p.seed
                )),
            }
        }
        let rows: Vec<SparsityPattern> = run
            .patterns
            .iter()
            .map(|p| SparsityPattern {
                task_name: format!("{} seed {}", p.task_name, p.seed),
                ..p.clone()
            })
            .collect();
        let grid = render_pattern(&rows)?;
        std::fs::write(out.join(format!("sparsity_{}.svg", run.name)), grid.svg)?;
        std::fs::write(out.join(format!("sparsity_{}.csv", run.name)), grid.csv)?;
    }
    write_json(&out.join("taps.json"), &taps)?;

    // one task-by-layer grid for the first seed shared by all sparse runs
    let sparse: Vec<&RunData> = data.iter().filter(|r| !r.patterns.is_empty()).collect();
    if sparse.len() > 1 {
        let seed = sparse[0].patterns[0].seed;
        let rows: Option<Vec<SparsityPattern>> = sparse
            .iter()
            .map(|r| r.patterns.iter().find(|p| p.seed == seed).cloned())
            .collect();
        match rows.map(|r| render_pattern(&r)) {
            Some(Ok(grid)) => {
                std::fs::write(out.join(format!("sparsity_tasks_seed-{seed}.svg")), grid.svg)?;
                std::fs::write(out.join(format!("sparsity_tasks_seed-{seed}.csv")), grid.csv)?;
            }
            Some(Err(e)) => warnings.push(format!("no combined sparsity grid: {e}")),
            None => warnings.push(format!("no combined sparsity grid: seed {seed} missing in some runs")),
        }
    }

    for w in &warnings {
        eprintln!("warning: {w}");
    }
    write_json(&out.join("warnings.json"), &warnings)?;
    Ok(())
}
