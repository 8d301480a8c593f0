//! Phase-1 sparse single-task training, phase-2 multi-task training with
//! uncertainty weighting, evaluation and multi-seed aggregation.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{extract_pattern, SparsityPattern, TapSelection};
use crate::autodiff::{sigmoid, Graph, LossKind, NodeId};
use crate::data::{Dataset, Split, TargetKey, SEGMENTATION_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::{binary_accuracy, mae, mean_cosine, IouCounts, MetricKind};
use crate::model::{assemble_model, build_backbone, BackboneSpec, HeadKind, HeadSpec, ModelGraph};
use crate::params::{ParamId, ParamStore};
use crate::prox::{build_channel_groups, penalty, sparsity_stats, GroupIndex, OptimizerConfig, ProxSgd};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub target: TargetKey,
    pub head: HeadKind,
    pub out_channels: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    pub loss: LossKind,
    pub metric: MetricKind,
}

fn default_hidden() -> usize {
    8
}

impl TaskSpec {
    /// Built-in task for one of the synthetic targets.
    pub fn preset(target: TargetKey) -> TaskSpec {
        let (head, out_channels, loss, metric) = match target {
            TargetKey::Edge => (HeadKind::DenseDecoder, 1, LossKind::SigmoidBce, MetricKind::Mae),
            TargetKey::Segmentation => (
                HeadKind::DenseDecoder,
                SEGMENTATION_CLASSES,
                LossKind::SoftmaxCe,
                MetricKind::Iou,
            ),
            TargetKey::Distance => (HeadKind::DenseDecoder, 1, LossKind::Mse, MetricKind::Mae),
            TargetKey::Label => (HeadKind::Classifier, 1, LossKind::SigmoidBce, MetricKind::Accuracy),
        };
        TaskSpec {
            name: target.as_str().to_owned(),
            target,
            head,
            out_channels,
            hidden: default_hidden(),
            loss,
            metric,
        }
    }

    pub fn by_name(name: &str) -> Result<TaskSpec> {
        TargetKey::parse(name).map(TaskSpec::preset)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match (self.head, self.metric) {
            (HeadKind::Classifier, MetricKind::Accuracy) => self.loss == LossKind::SigmoidBce,
            (HeadKind::DenseDecoder, MetricKind::Iou) => self.loss == LossKind::SoftmaxCe,
            (HeadKind::DenseDecoder, MetricKind::CosineSimilarity) => self.loss == LossKind::Cosine,
            (HeadKind::DenseDecoder, MetricKind::Mae) => {
                matches!(self.loss, LossKind::Mse | LossKind::SigmoidBce)
            }
            _ => false,
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "task `{}`: {:?} head with {} loss cannot report {}",
                self.name, self.head, self.loss, self.metric
            )));
        }
        Ok(())
    }

    pub fn head_spec(&self) -> HeadSpec {
        HeadSpec {
            task_name: self.name.clone(),
            kind: self.head,
            out_channels: self.out_channels,
            hidden: self.hidden,
            loss: self.loss,
            metric: self.metric,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    /// Validation metrics every this many epochs (and always after the last).
    pub eval_every: usize,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            eval_every: 1,
            seeds: (0..5).collect(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, phase: Phase, tasks: &[TaskSpec]) -> Result<()> {
        self.optimizer.validate()?;
        if tasks.is_empty() {
            return Err(Error::InvalidArgument("no tasks given".into()));
        }
        for t in tasks {
            t.validate()?;
        }
        match phase {
            Phase::One if tasks.len() != 1 => Err(Error::InvalidArgument(format!(
                "phase 1 trains exactly one task, got {}",
                tasks.len()
            ))),
            Phase::Two if self.optimizer.lambda != 0.0 => Err(Error::InvalidArgument(
                "phase 2 runs without a sparsity penalty; set lambda to 0".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Copy with the seed replaced.
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        let mut c = self.clone();
        c.optimizer.seed = seed;
        c
    }
}

/// Learnable `eta_t = log sigma_t^2`, one scalar loss-weight parameter per task.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UncertaintyWeights {
    pub eta: BTreeMap<String, ParamId>,
}

impl UncertaintyWeights {
    /// Registers `eta_t = 0` (sigma_t = 1) for every task in `store`.
    pub fn register(store: &mut ParamStore, tasks: &[TaskSpec]) -> Self {
        let eta = tasks
            .iter()
            .map(|t| {
                let name = format!("loss_weight.{}.eta", t.name);
                let id = match store.find(&name) {
                    Some(p) => p.id,
                    None => store.add_loss_weight(name, Tensor::scalar(0.0)),
                };
                (t.name.clone(), id)
            })
            .collect();
        UncertaintyWeights { eta }
    }

    pub fn sigma2(&self, store: &ParamStore) -> BTreeMap<String, f64> {
        self.eta
            .iter()
            .map(|(t, &id)| (t.clone(), store.tensor(id).item().exp()))
            .collect()
    }
}

/// `sum_t L_t / (2 sigma_t^2) + log sigma_t` with `sigma_t^2 = exp(eta_t)`.
pub fn combined_loss(
    g: &mut Graph,
    store: &ParamStore,
    task_losses: &BTreeMap<String, NodeId>,
    weights: &UncertaintyWeights,
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for (task, &l) in task_losses {
        if !g.value(l).all_finite() {
            return Err(Error::NonFinite(format!("loss of task `{task}`")));
        }
        let id = *weights
            .eta
            .get(task)
            .ok_or_else(|| Error::UnknownTask(task.clone()))?;
        let eta = g.param(store, id)?;
        let neg = g.scale(eta, -1.0)?;
        let precision = g.exp(neg)?;
        let weighted = g.mul(l, precision)?;
        let weighted = g.scale(weighted, 0.5)?;
        let reg = g.scale(eta, 0.5)?;
        let term = g.add(weighted, reg)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("combined loss over zero tasks".into()))
}

/// Plain-number form of [`combined_loss`].
pub fn combined_loss_value(losses: &[f64], eta: &[f64]) -> f64 {
    losses
        .iter()
        .zip(eta)
        .map(|(l, e)| 0.5 * l * (-e).exp() + 0.5 * e)
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub seed: u64,
    pub epoch: usize,
    /// Mean training objective over the epoch's batches (loss only, no penalty).
    pub loss: f64,
    pub task_losses: BTreeMap<String, f64>,
    /// `R` at the end of the epoch.
    pub penalty: f64,
    pub percent_sparsity: f64,
    pub zero_channels_per_layer: BTreeMap<usize, usize>,
    pub sigma2: BTreeMap<String, f64>,
    pub val_metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    pub metric: MetricKind,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub seed: u64,
    pub split: Split,
    pub tasks: BTreeMap<String, TaskMetric>,
}

impl MetricReport {
    pub fn value(&self, task: &str) -> Option<f64> {
        self.tasks.get(task).map(|m| m.value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub task: String,
    pub metric: MetricKind,
    pub mean: f64,
    /// Unbiased standard deviation; absent for a single run.
    pub std: Option<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub rows: Vec<AggregateRow>,
}

impl RunAggregate {
    pub fn row(&self, task: &str) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.task == task)
    }

    /// One-run summary with no spread.
    pub fn single(report: &MetricReport) -> Self {
        RunAggregate {
            rows: report
                .tasks
                .iter()
                .map(|(t, m)| AggregateRow {
                    task: t.clone(),
                    metric: m.metric,
                    mean: m.value,
                    std: None,
                    seeds: vec![report.seed],
                })
                .collect(),
        }
    }
}

/// Per-task mean and unbiased std over at least two reports on the same tasks.
pub fn aggregate_runs(reports: &[MetricReport]) -> Result<RunAggregate> {
    if reports.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "aggregation needs at least 2 runs, got {}",
            reports.len()
        )));
    }
    let keys: Vec<&String> = reports[0].tasks.keys().collect();
    if reports.iter().any(|r| r.tasks.keys().collect::<Vec<_>>() != keys) {
        return Err(Error::InvalidArgument("reports cover different task sets".into()));
    }
    let n = reports.len() as f64;
    let rows = reports[0]
        .tasks
        .iter()
        .map(|(task, m)| {
            let vals: Vec<f64> = reports.iter().map(|r| r.tasks[task].value).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            AggregateRow {
                task: task.clone(),
                metric: m.metric,
                mean,
                std: Some(var.sqrt()),
                seeds: reports.iter().map(|r| r.seed).collect(),
            }
        })
        .collect();
    Ok(RunAggregate { rows })
}

fn batch_input(data: &Dataset, idx: &[usize]) -> Result<Tensor> {
    let items: Vec<&Tensor> = idx.iter().map(|&i| &data.samples[i].image).collect();
    Tensor::stack(&items)
}

fn missing(i: usize, key: TargetKey) -> Error {
    Error::InvalidArgument(format!("sample {i} has no `{}` target", key.as_str()))
}

fn batch_target(data: &Dataset, idx: &[usize], key: TargetKey) -> Result<Tensor> {
    if key == TargetKey::Label {
        let labels = idx
            .iter()
            .map(|&i| data.samples[i].label.ok_or_else(|| missing(i, key)))
            .collect::<Result<Vec<f64>>>()?;
        return Tensor::new(vec![idx.len(), 1], labels);
    }
    let items = idx
        .iter()
        .map(|&i| {
            let s = &data.samples[i];
            match key {
                TargetKey::Edge => s.edge.as_ref(),
                TargetKey::Segmentation => s.segmentation.as_ref(),
                TargetKey::Distance => s.distance.as_ref(),
                TargetKey::Label => unreachable!(),
            }
            .ok_or_else(|| missing(i, key))
        })
        .collect::<Result<Vec<&Tensor>>>()?;
    Tensor::stack(&items)
}

/// Per-task accumulator for one evaluation pass.
enum MetricAcc {
    Iou(IouCounts),
    /// Running sum and element count.
    Mean(f64, usize),
}

fn accumulate(acc: &mut MetricAcc, task: &TaskSpec, out: &Tensor, target: &Tensor) {
    match acc {
        MetricAcc::Iou(counts) => {
            let s = out.shape();
            let (n, k) = (s[0], s[1]);
            let inner = out.numel() / (n * k);
            let mut pred = Vec::with_capacity(n * inner);
            for b in 0..n {
                for i in 0..inner {
                    let at = |c: usize| out.data()[(b * k + c) * inner + i];
                    let best = (1..k).fold(0, |best, c| if at(c) > at(best) { c } else { best });
                    pred.push(best);
                }
            }
            let truth: Vec<usize> = target.data().iter().map(|&v| v as usize).collect();
            counts.add(&pred, &truth);
        }
        MetricAcc::Mean(sum, count) => {
            let probs: Vec<f64>;
            let pred = if task.loss == LossKind::SigmoidBce {
                probs = out.data().iter().map(|&z| sigmoid(z)).collect();
                &probs[..]
            } else {
                out.data()
            };
            let m = out.numel();
            let v = match task.metric {
                MetricKind::Mae => mae(pred, target.data()) * m as f64,
                MetricKind::Accuracy => binary_accuracy(pred, target.data()) * m as f64,
                MetricKind::CosineSimilarity => {
                    let s = out.shape();
                    let inner = m / (s[0] * s[1]);
                    mean_cosine(pred, target.data(), s[0], s[1]) * (s[0] * inner) as f64
                }
                MetricKind::Iou => unreachable!(),
            };
            let weight = match task.metric {
                MetricKind::CosineSimilarity => m / out.shape()[1],
                _ => m,
            };
            *sum += v;
            *count += weight;
        }
    }
}

/// Metrics of `model` on the listed samples, batched in index order.
pub fn evaluate(
    model: &ModelGraph,
    tasks: &[TaskSpec],
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<BTreeMap<String, TaskMetric>> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("evaluation over zero samples".into()));
    }
    let mut accs: Vec<MetricAcc> = tasks
        .iter()
        .map(|t| match t.metric {
            MetricKind::Iou => MetricAcc::Iou(IouCounts::new(t.out_channels)),
            _ => MetricAcc::Mean(0.0, 0),
        })
        .collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let x = g.constant(batch_input(data, chunk)?)?;
        let outs = model.forward(&mut g, x)?;
        for (t, acc) in tasks.iter().zip(&mut accs) {
            let node = *outs.get(&t.name).ok_or_else(|| Error::UnknownTask(t.name.clone()))?;
            let target = batch_target(data, chunk, t.target)?;
            accumulate(acc, t, g.value(node), &target);
        }
    }
    Ok(tasks
        .iter()
        .zip(accs)
        .map(|(t, acc)| {
            let value = match acc {
                MetricAcc::Iou(c) => c.mean().unwrap_or(0.0),
                MetricAcc::Mean(sum, count) => sum / count.max(1) as f64,
            };
            (t.name.clone(), TaskMetric { metric: t.metric, value })
        })
        .collect())
}

/// Metric report on one split.
pub fn evaluate_split(
    model: &ModelGraph,
    tasks: &[TaskSpec],
    data: &Dataset,
    split: Split,
    batch_size: usize,
    seed: u64,
) -> Result<MetricReport> {
    Ok(MetricReport {
        seed,
        split,
        tasks: evaluate(model, tasks, data, &data.indices(split), batch_size)?,
    })
}

fn as_divergence(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(detail) => Error::Divergence { epoch, detail },
        other => other,
    }
}

/// Shared epoch loop for both phases.
fn fit(
    model: &mut ModelGraph,
    tasks: &[TaskSpec],
    data: &Dataset,
    config: &TrainConfig,
    index: &GroupIndex,
    weights: Option<&UncertaintyWeights>,
) -> Result<Vec<EpochRecord>> {
    let opt = &config.optimizer;
    let mut train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let val_idx = data.indices(Split::Val);
    let mut sgd = ProxSgd::new(opt);
    let mut history = Vec::with_capacity(opt.epochs);

    for epoch in 0..opt.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
        rng.set_stream(epoch as u64 + 1);
        train_idx.sort_unstable();
        train_idx.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut task_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut batches = 0usize;
        for chunk in train_idx.chunks(opt.batch_size) {
            let mut step = || -> Result<()> {
                let mut g = Graph::new();
                let x = g.constant(batch_input(data, chunk)?)?;
                let outs = model.forward(&mut g, x)?;
                let mut losses = BTreeMap::new();
                for t in tasks {
                    let target = batch_target(data, chunk, t.target)?;
                    let l = g.loss(t.loss, outs[&t.name], &target)?;
                    *task_sums.entry(t.name.clone()).or_default() += g.value(l).item();
                    losses.insert(t.name.clone(), l);
                }
                let total = match weights {
                    Some(w) if tasks.len() > 1 => combined_loss(&mut g, &model.store, &losses, w)?,
                    _ => losses[&tasks[0].name],
                };
                let value = g.value(total).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("training loss {value}")));
                }
                loss_sum += value;
                let grads = g.backward(total)?;
                sgd.step(&mut model.store, &grads, index)
            };
            step().map_err(as_divergence(epoch))?;
            batches += 1;
        }

        let stats = sparsity_stats(&model.store, index)?;
        let last = epoch + 1 == opt.epochs;
        let val_metrics = if !val_idx.is_empty() && (last || (config.eval_every > 0 && (epoch + 1) % config.eval_every == 0)) {
            evaluate(model, tasks, data, &val_idx, opt.batch_size)?
                .into_iter()
                .map(|(t, m)| (t, m.value))
                .collect()
        } else {
            BTreeMap::new()
        };
        history.push(EpochRecord {
            seed: opt.seed,
            epoch,
            loss: loss_sum / batches as f64,
            task_losses: task_sums.into_iter().map(|(t, s)| (t, s / batches as f64)).collect(),
            penalty: penalty(&model.store, index)?,
            percent_sparsity: stats.percent_zero_parameters,
            zero_channels_per_layer: stats.zero_channels_per_layer,
            sigma2: weights.map(|w| w.sigma2(&model.store)).unwrap_or_default(),
            val_metrics,
        });
    }
    Ok(history)
}

#[derive(Clone, Debug)]
pub struct Phase1Outcome {
    pub model: ModelGraph,
    pub index: GroupIndex,
    pub pattern: SparsityPattern,
    pub history: Vec<EpochRecord>,
}

impl Phase1Outcome {
    pub fn final_sparsity(&self) -> f64 {
        self.history.last().map_or(0.0, |r| r.percent_sparsity)
    }
}

/// Single-task training of a full-depth model under the group penalty. The
/// seed drives initialization and batch order.
pub fn train_phase1(
    backbone: &BackboneSpec,
    task: &TaskSpec,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<Phase1Outcome> {
    config.validate(Phase::One, std::slice::from_ref(task))?;
    let opt = &config.optimizer;
    let bb = build_backbone(backbone, opt.seed)?;
    let last = bb.blocks.len() - 1;
    let mut model = assemble_model(bb, &[(task.head_spec(), last)], opt.seed)?;
    let index = build_channel_groups(&model.store, opt.lambda);
    let history = fit(&mut model, std::slice::from_ref(task), data, config, &index, None)?;
    let pattern = extract_pattern(&model.store, &index, &task.name, opt.lambda, opt.seed)?;
    Ok(Phase1Outcome {
        model,
        index,
        pattern,
        history,
    })
}

#[derive(Clone, Debug)]
pub struct Phase2Outcome {
    pub model: ModelGraph,
    pub weights: UncertaintyWeights,
    pub history: Vec<EpochRecord>,
    pub report: MetricReport,
}

/// Fresh model with heads at `taps`; no weights are carried over from phase 1.
pub fn build_mtl_model(
    backbone: &BackboneSpec,
    tasks: &[TaskSpec],
    taps: &TapSelection,
    seed: u64,
) -> Result<ModelGraph> {
    let bb = build_backbone(backbone, seed)?;
    let attachments = tasks
        .iter()
        .map(|t| {
            let tap = *taps.taps.get(&t.name).ok_or_else(|| Error::UnknownTask(t.name.clone()))?;
            Ok((t.head_spec(), tap))
        })
        .collect::<Result<Vec<_>>>()?;
    assemble_model(bb, &attachments, seed)
}

/// Every task at the final block.
pub fn dense_taps(backbone: &BackboneSpec, tasks: &[TaskSpec]) -> TapSelection {
    let last = backbone.depth().saturating_sub(1);
    TapSelection {
        taps: tasks.iter().map(|t| (t.name.clone(), last)).collect(),
    }
}

/// Multi-task training of an assembled model with the uncertainty-weighted
/// loss (a single task trains on its plain loss). Reports validation metrics.
pub fn train_phase2(
    mut model: ModelGraph,
    tasks: &[TaskSpec],
    data: &Dataset,
    config: &TrainConfig,
) -> Result<Phase2Outcome> {
    config.validate(Phase::Two, tasks)?;
    for t in tasks {
        if model.head(&t.name).is_none() {
            return Err(Error::UnknownTask(t.name.clone()));
        }
    }
    let weights = UncertaintyWeights::register(&mut model.store, tasks);
    let index = build_channel_groups(&model.store, 0.0);
    let history = fit(&mut model, tasks, data, config, &index, Some(&weights))?;
    let split = if data.indices(Split::Val).is_empty() {
        Split::Train
    } else {
        Split::Val
    };
    let report = evaluate_split(&model, tasks, data, split, config.optimizer.batch_size, config.optimizer.seed)?;
    Ok(Phase2Outcome {
        model,
        weights,
        history,
        report,
    })
}

/// One JSON object per line.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in history {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SceneConfig};

    fn report(seed: u64, vals: &[(&str, f64)]) -> MetricReport {
        MetricReport {
            seed,
            split: Split::Val,
            tasks: vals
                .iter()
                .map(|(t, v)| {
                    (
                        t.to_string(),
                        TaskMetric {
                            metric: MetricKind::Mae,
                            value: *v,
                        },
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn combined_loss_examples() {
        assert_eq!(combined_loss_value(&[2.0, 8.0], &[0.0, 0.0]), 5.0);
        let v = combined_loss_value(&[2.0, 8.0], &[0.0, 4f64.ln()]);
        assert!((v - 2.693147).abs() < 1e-6, "{v}");

        let mut store = ParamStore::new();
        let tasks = [TaskSpec::preset(TargetKey::Edge), TaskSpec::preset(TargetKey::Distance)];
        let w = UncertaintyWeights::register(&mut store, &tasks);
        let mut g = Graph::new();
        let mut losses = BTreeMap::new();
        losses.insert("edge".to_owned(), g.constant(Tensor::scalar(2.0)).unwrap());
        losses.insert("distance".to_owned(), g.constant(Tensor::scalar(8.0)).unwrap());
        let total = combined_loss(&mut g, &store, &losses, &w).unwrap();
        assert_eq!(g.value(total).item(), 5.0);
    }

    #[test]
    fn aggregation() {
        let a = aggregate_runs(&[report(0, &[("t", 0.4)]), report(1, &[("t", 0.5)]), report(2, &[("t", 0.6)])]).unwrap();
        let row = a.row("t").unwrap();
        assert!((row.mean - 0.5).abs() < 1e-15);
        assert!((row.std.unwrap() - 0.1).abs() < 1e-12);

        let same = aggregate_runs(&[report(0, &[("t", 0.3)]), report(1, &[("t", 0.3)])]).unwrap();
        assert_eq!(same.rows[0].std, Some(0.0));
        assert!(aggregate_runs(&[report(0, &[("t", 0.3)])]).is_err());
        assert!(aggregate_runs(&[report(0, &[("t", 0.3)]), report(1, &[("u", 0.3)])]).is_err());
    }

    #[test]
    fn config_phase_rules() {
        let t = TaskSpec::preset(TargetKey::Edge);
        let c = TrainConfig::default();
        assert!(c.validate(Phase::One, std::slice::from_ref(&t)).is_ok());
        assert!(c.validate(Phase::One, &[t.clone(), t.clone()]).is_err());
        assert!(c.validate(Phase::Two, std::slice::from_ref(&t)).is_err());
        let mut bad = t;
        bad.metric = MetricKind::Iou;
        assert!(bad.validate().is_err());
    }

    fn tiny() -> (BackboneSpec, Dataset, TrainConfig) {
        let scene = SceneConfig {
            size: 8,
            ..Default::default()
        };
        let data = generate_dataset(&scene, 3, 40).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.optimizer.epochs = 2;
        cfg.optimizer.batch_size = 8;
        (BackboneSpec::desk(1, 4, 3), data, cfg)
    }

    #[test]
    fn phase1_without_penalty_stays_dense_and_is_deterministic() {
        let (spec, data, mut cfg) = tiny();
        cfg.optimizer.lambda = 0.0;
        let task = TaskSpec::preset(TargetKey::Edge);
        let a = train_phase1(&spec, &task, &data, &cfg).unwrap();
        assert_eq!(a.final_sparsity(), 0.0);
        assert!(a.pattern.layers.iter().all(|l| l.zero.iter().all(|&z| !z)));
        let b = train_phase1(&spec, &task, &data, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a.history).unwrap(),
            serde_json::to_string(&b.history).unwrap()
        );
    }

    #[test]
    fn huge_lambda_zeroes_everything() {
        let (spec, data, mut cfg) = tiny();
        cfg.optimizer.lambda = 10.0;
        let out = train_phase1(&spec, &TaskSpec::preset(TargetKey::Distance), &data, &cfg).unwrap();
        assert_eq!(out.final_sparsity(), 100.0);
        assert!(crate::analysis::last_active_layer(&out.pattern).is_err());
    }

    #[test]
    fn phase2_records_sigma_and_metrics() {
        let (spec, data, mut cfg) = tiny();
        cfg.optimizer.lambda = 0.0;
        let tasks = [TaskSpec::preset(TargetKey::Edge), TaskSpec::preset(TargetKey::Label)];
        let model = build_mtl_model(&spec, &tasks, &dense_taps(&spec, &tasks), 1).unwrap();
        let out = train_phase2(model, &tasks, &data, &cfg).unwrap();
        let last = out.history.last().unwrap();
        assert_eq!(last.sigma2.len(), 2);
        assert_eq!(out.report.tasks.len(), 2);
        let acc = out.report.value("classification").unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
