//! Channel-wise l1/l2 group penalty and its proximal gradient step.
//!
//! Every output channel of a penalizable backbone conv forms one group: the
//! channel's kernel slice plus its bias entry. The penalty is
//! `R = sum_g lambda_g * ||theta_g||_2` with `lambda_g = lambda * sqrt(N_g)`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore, Role};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupId {
    pub layer_id: usize,
    pub weight: ParamId,
    pub channel: usize,
}

/// Contiguous run of one parameter's values belonging to a group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberSpan {
    pub param: ParamId,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterGroup {
    pub id: GroupId,
    pub members: Vec<MemberSpan>,
    pub size: usize,
    pub lambda_g: f64,
}

impl ParameterGroup {
    pub fn norm(&self, store: &ParamStore) -> f64 {
        self.members
            .iter()
            .flat_map(|m| &store.tensor(m.param).data()[m.start..m.start + m.len])
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self, store: &ParamStore) -> bool {
        self.members
            .iter()
            .flat_map(|m| &store.tensor(m.param).data()[m.start..m.start + m.len])
            .all(|&v| v == 0.0)
    }
}

/// All channel groups of a model, in backbone order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupIndex {
    pub groups: Vec<ParameterGroup>,
    pub covered_layers: BTreeSet<usize>,
    pub lambda: f64,
    /// Set when the model had no penalizable parameter at all.
    pub empty_warning: bool,
    shapes: BTreeMap<ParamId, Vec<usize>>,
}

impl GroupIndex {
    /// Total group count `G`.
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn penalized_count(&self) -> usize {
        self.groups.iter().map(|g| g.size).sum()
    }

    /// Errors if the store no longer matches the spans this index was built on.
    pub fn check(&self, store: &ParamStore) -> Result<()> {
        for (&id, shape) in &self.shapes {
            if id.0 >= store.len() {
                return Err(Error::StaleIndex(format!("parameter {} is gone", id.0)));
            }
            let p = store.get(id);
            if p.tensor.shape() != shape.as_slice() || !p.penalizable {
                return Err(Error::StaleIndex(format!(
                    "parameter `{}` changed since the index was built",
                    p.name
                )));
            }
        }
        let penalizable = store.iter().filter(|p| p.penalizable).count();
        if penalizable != self.shapes.len() {
            return Err(Error::StaleIndex(
                "penalizable parameter set changed since the index was built".into(),
            ));
        }
        Ok(())
    }
}

/// Builds one group per (layer, conv, output channel) over penalizable
/// backbone parameters. Biases linked to a weight join that weight's groups;
/// any other penalizable tensor is grouped along its first axis.
pub fn build_channel_groups(store: &ParamStore, lambda: f64) -> GroupIndex {
    let mut biases: BTreeMap<ParamId, ParamId> = BTreeMap::new();
    for p in store.iter().filter(|p| p.penalizable) {
        if let Some(w) = p.group_with {
            if store.get(w).penalizable {
                biases.insert(w, p.id);
            }
        }
    }
    let linked: BTreeSet<ParamId> = biases.values().copied().collect();

    let mut groups = Vec::new();
    let mut shapes = BTreeMap::new();
    for p in store.iter().filter(|p| p.penalizable && p.role == Role::Backbone) {
        shapes.insert(p.id, p.tensor.shape().to_vec());
        if linked.contains(&p.id) {
            continue;
        }
        let layer_id = p.layer_id.unwrap_or(0);
        let channels = p.tensor.shape()[0];
        let per_channel = p.tensor.numel() / channels;
        let bias = biases.get(&p.id).copied();
        for c in 0..channels {
            let mut members = vec![MemberSpan {
                param: p.id,
                start: c * per_channel,
                len: per_channel,
            }];
            if let Some(b) = bias {
                members.push(MemberSpan {
                    param: b,
                    start: c,
                    len: 1,
                });
            }
            let size: usize = members.iter().map(|m| m.len).sum();
            groups.push(ParameterGroup {
                id: GroupId {
                    layer_id,
                    weight: p.id,
                    channel: c,
                },
                members,
                size,
                lambda_g: lambda * (size as f64).sqrt(),
            });
        }
    }
    groups.sort_by_key(|g| g.id);
    let covered_layers = groups.iter().map(|g| g.id.layer_id).collect();
    GroupIndex {
        empty_warning: groups.is_empty(),
        groups,
        covered_layers,
        lambda,
        shapes,
    }
}

/// `R = sum_g lambda_g ||theta_g||_2`.
pub fn penalty(store: &ParamStore, index: &GroupIndex) -> Result<f64> {
    index.check(store)?;
    Ok(index
        .groups
        .iter()
        .map(|g| g.lambda_g * g.norm(store))
        .sum())
}

/// Block soft-thresholding: the minimizer of `0.5||x - v||^2 + t||x||_2`.
/// Groups at or below the threshold come back as exact zeros.
pub fn prox_group(values: &[f64], threshold: f64) -> Vec<f64> {
    let mut out = values.to_vec();
    prox_group_in_place(&mut out, threshold);
    out
}

pub fn prox_group_in_place(values: &mut [f64], threshold: f64) {
    if threshold == 0.0 {
        return;
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > threshold {
        let scale = 1.0 - threshold / norm;
        values.iter_mut().for_each(|v| *v *= scale);
    } else {
        values.fill(0.0);
    }
}

/// How the group threshold scales with the step size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdConvention {
    /// Threshold `alpha * lambda_g`, the exact prox of the scaled penalty.
    #[default]
    AlphaScaled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Heavy-ball momentum for non-penalized parameters only.
    pub momentum: f64,
    pub threshold_convention: ThresholdConvention,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lambda: 0.001,
            alpha: 0.05,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            momentum: 0.0,
            threshold_convention: ThresholdConvention::AlphaScaled,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Proximal SGD. Holds momentum buffers for the non-penalized parameters.
#[derive(Clone, Debug)]
pub struct ProxSgd {
    pub alpha: f64,
    pub momentum: f64,
    velocity: BTreeMap<ParamId, Tensor>,
}

impl ProxSgd {
    pub fn new(config: &OptimizerConfig) -> Self {
        ProxSgd {
            alpha: config.alpha,
            momentum: config.momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Plain gradient step on every parameter, then the group prox with
    /// threshold `alpha * lambda_g` on every penalized group.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, index: &GroupIndex) -> Result<()> {
        index.check(store)?;
        for p in store.iter() {
            let g = grads.require(store, p.id)?;
            if g.shape() != p.tensor.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{}` has shape {:?}, parameter {:?}",
                    p.name,
                    g.shape(),
                    p.tensor.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient for `{}`", p.name)));
            }
        }

        let alpha = self.alpha;
        for p in store.iter_mut() {
            let g = grads.get(p.id).expect("checked above").data();
            let shape = p.tensor.shape().to_vec();
            let theta = p.tensor.data_mut();
            if p.penalizable || self.momentum == 0.0 {
                for (t, gv) in theta.iter_mut().zip(g) {
                    *t -= alpha * gv;
                }
            } else {
                let v = self
                    .velocity
                    .entry(p.id)
                    .or_insert_with(|| Tensor::zeros(&shape));
                for ((t, vv), gv) in theta.iter_mut().zip(v.data_mut()).zip(g) {
                    *vv = self.momentum * *vv + gv;
                    *t -= alpha * *vv;
                }
            }
        }

        let mut buf = Vec::new();
        for group in &index.groups {
            buf.clear();
            for m in &group.members {
                buf.extend_from_slice(&store.tensor(m.param).data()[m.start..m.start + m.len]);
            }
            prox_group_in_place(&mut buf, alpha * group.lambda_g);
            let mut off = 0;
            for m in &group.members {
                store.tensor_mut(m.param).data_mut()[m.start..m.start + m.len]
                    .copy_from_slice(&buf[off..off + m.len]);
                off += m.len;
            }
        }
        Ok(())
    }
}

/// One momentum-free proximal step.
pub fn prox_step(
    store: &mut ParamStore,
    grads: &Gradients,
    index: &GroupIndex,
    config: &OptimizerConfig,
) -> Result<()> {
    let mut opt = ProxSgd::new(config);
    opt.momentum = 0.0;
    opt.step(store, grads, index)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    pub percent_zero_parameters: f64,
    pub zero_channels_per_layer: BTreeMap<usize, usize>,
    pub per_group_zero_flags: Vec<bool>,
}

pub fn sparsity_stats(store: &ParamStore, index: &GroupIndex) -> Result<SparsityStats> {
    index.check(store)?;
    let (mut zeros, mut total) = (0usize, 0usize);
    for p in store.iter().filter(|p| p.penalizable) {
        total += p.tensor.numel();
        zeros += p.tensor.data().iter().filter(|&&v| v == 0.0).count();
    }
    let flags: Vec<bool> = index.groups.iter().map(|g| g.is_zero(store)).collect();
    let mut per_layer: BTreeMap<usize, usize> =
        index.covered_layers.iter().map(|&l| (l, 0)).collect();
    for (g, &z) in index.groups.iter().zip(&flags) {
        if z {
            *per_layer.entry(g.id.layer_id).or_default() += 1;
        }
    }
    Ok(SparsityStats {
        percent_zero_parameters: if total == 0 {
            0.0
        } else {
            100.0 * zeros as f64 / total as f64
        },
        zero_channels_per_layer: per_layer,
        per_group_zero_flags: flags,
    })
}
