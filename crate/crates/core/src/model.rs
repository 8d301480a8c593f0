//! Residual backbones, task heads and their assembly into STL, dense-MTL and
//! layer-optimized multi-task models.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{last_active_layer, SparsityPattern, TapSelection};
use crate::autodiff::{ConvGeometry, Graph, LossKind, NodeId};
use crate::error::{Error, Result};
use crate::metrics::MetricKind;
use crate::params::{ParamId, ParamStore, Role};
use crate::tensor::Tensor;

/// One residual block: `y = P(x) + conv_b(relu(conv_a(relu(P(x)))))`, where
/// `P` is an optional non-penalizable projection conv.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub width: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_one")]
    pub dilation: usize,
    #[serde(default = "default_true")]
    pub penalizable: bool,
    /// Insert a projection conv on the block input (needed when the width changes).
    #[serde(default)]
    pub projection: bool,
    /// Give the two branch convs a bias (each bias entry joins its channel's group).
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_kernel() -> usize {
    3
}
fn default_one() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub input_channels: usize,
    pub blocks: Vec<BlockSpec>,
    /// Scale applied to the He init of both residual-branch convs.
    #[serde(default = "default_branch_scale")]
    pub branch_init_scale: f64,
}

fn default_branch_scale() -> f64 {
    1.0
}

impl BackboneSpec {
    /// Constant-width dilated stack: `depth` blocks, dilations 1,1,2,2,4,4,...
    pub fn desk(input_channels: usize, width: usize, depth: usize) -> Self {
        let dilations = [1, 1, 2, 2, 4, 4];
        let blocks = (0..depth)
            .map(|i| BlockSpec {
                width,
                kernel: 3,
                dilation: dilations[i % dilations.len()],
                penalizable: true,
                projection: i == 0 && input_channels != width,
                bias: true,
            })
            .collect();
        BackboneSpec {
            input_channels,
            blocks,
            branch_init_scale: default_branch_scale(),
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Same stack with or without biases on the residual-branch convs.
    pub fn with_branch_bias(mut self, bias: bool) -> Self {
        for b in &mut self.blocks {
            b.bias = bias;
        }
        self
    }

    pub fn is_constant_width(&self) -> bool {
        self.blocks.windows(2).all(|w| w[0].width == w[1].width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::InvalidArgument("input_channels must be >= 1".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::InvalidArgument("backbone needs at least one block".into()));
        }
        let mut incoming = self.input_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.width == 0 || b.dilation == 0 || b.kernel % 2 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "block {i}: width and dilation must be >= 1 and the kernel odd"
                )));
            }
            if b.width != incoming && !b.projection {
                return Err(Error::InvalidArgument(format!(
                    "block {i}: width {} differs from incoming {incoming} across an identity skip",
                    b.width
                )));
            }
            incoming = b.width;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// conv3x3 -> relu -> conv1x1 -> nearest upsample to input size.
    DenseDecoder,
    /// global average pool -> affine -> relu -> affine.
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeadSpec {
    pub task_name: String,
    pub kind: HeadKind,
    pub out_channels: usize,
    pub hidden: usize,
    pub loss: LossKind,
    pub metric: MetricKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockParams {
    pub projection: Option<ConvParams>,
    pub conv_a: ConvParams,
    pub conv_b: ConvParams,
}

/// A freshly initialized backbone, not yet wired to any head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub store: ParamStore,
    pub blocks: Vec<BlockParams>,
}

fn he(shape: &[usize], fan_in: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, scale * (2.0 / fan_in as f64).sqrt(), rng)
}

fn add_conv(
    store: &mut ParamStore,
    name: &str,
    layer: usize,
    penalizable: bool,
    shape: [usize; 4],
    geom: ConvGeometry,
    scale: f64,
    bias: bool,
    rng: &mut ChaCha8Rng,
) -> ConvParams {
    let fan_in = shape[1] * shape[2] * shape[3];
    let weight = store.add_backbone(format!("{name}.weight"), he(&shape, fan_in, scale, rng), layer, penalizable);
    let bias = bias.then(|| store.add_backbone_bias(format!("{name}.bias"), Tensor::zeros(&[shape[0]]), weight));
    ConvParams { weight, bias, geom }
}

/// Deterministic init of every block from `seed`.
pub fn build_backbone(spec: &BackboneSpec, seed: u64) -> Result<Backbone> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut blocks = Vec::with_capacity(spec.blocks.len());
    let mut incoming = spec.input_channels;
    for (i, b) in spec.blocks.iter().enumerate() {
        let k = b.kernel;
        let projection = b.projection.then(|| {
            add_conv(
                &mut store,
                &format!("backbone.{i}.proj"),
                i,
                false,
                [b.width, incoming, k, k],
                ConvGeometry::same(k, 1),
                1.0,
                true,
                &mut rng,
            )
        });
        let geom = ConvGeometry::same(k, b.dilation);
        let conv_a = add_conv(
            &mut store,
            &format!("backbone.{i}.conv_a"),
            i,
            b.penalizable,
            [b.width, b.width, k, k],
            geom,
            spec.branch_init_scale,
            b.bias,
            &mut rng,
        );
        let conv_b = add_conv(
            &mut store,
            &format!("backbone.{i}.conv_b"),
            i,
            b.penalizable,
            [b.width, b.width, k, k],
            geom,
            spec.branch_init_scale,
            b.bias,
            &mut rng,
        );
        blocks.push(BlockParams {
            projection,
            conv_a,
            conv_b,
        });
        incoming = b.width;
    }
    Ok(Backbone {
        spec: spec.clone(),
        store,
        blocks,
    })
}

fn conv(g: &mut Graph, store: &ParamStore, x: NodeId, c: &ConvParams) -> Result<NodeId> {
    let w = g.param(store, c.weight)?;
    let b = match c.bias {
        Some(id) => g.param(store, id)?,
        None => {
            let cout = store.tensor(c.weight).shape()[0];
            g.constant(Tensor::zeros(&[cout]))?
        }
    };
    g.conv2d(x, w, b, c.geom)
}

/// Runs blocks in order and returns every block output. The residual branch of
/// block `skip_branch` (if any) is left out, keeping its projection.
fn run_blocks(
    g: &mut Graph,
    store: &ParamStore,
    blocks: &[BlockParams],
    input: NodeId,
    skip_branch: Option<usize>,
) -> Result<Vec<NodeId>> {
    let mut x = input;
    let mut outs = Vec::with_capacity(blocks.len());
    for (i, b) in blocks.iter().enumerate() {
        if let Some(p) = &b.projection {
            x = conv(g, store, x, p)?;
        }
        if skip_branch != Some(i) {
            let h = g.relu(x)?;
            let h = conv(g, store, h, &b.conv_a)?;
            let h = g.relu(h)?;
            let h = conv(g, store, h, &b.conv_b)?;
            x = g.add(x, h)?;
        }
        outs.push(x);
    }
    Ok(outs)
}

impl Backbone {
    pub fn forward(&self, g: &mut Graph, input: NodeId) -> Result<Vec<NodeId>> {
        run_blocks(g, &self.store, &self.blocks, input, None)
    }

    /// Forward pass with one block's residual branch removed.
    pub fn forward_without_branch(&self, g: &mut Graph, input: NodeId, block: usize) -> Result<Vec<NodeId>> {
        run_blocks(g, &self.store, &self.blocks, input, Some(block))
    }

    /// Sets every penalizable parameter of `block` to zero.
    pub fn zero_block(&mut self, block: usize) {
        zero_layer(&mut self.store, block);
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count(None)
    }
}

fn zero_layer(store: &mut ParamStore, layer: usize) {
    for p in store.iter_mut() {
        if p.penalizable && p.layer_id == Some(layer) {
            p.tensor.data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Head {
    pub spec: HeadSpec,
    pub tap: usize,
    /// First layer then second layer, each as (weight, bias).
    pub layers: [(ParamId, ParamId); 2],
}

/// Backbone truncated after the deepest tap plus one head per task.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelGraph {
    pub backbone_spec: BackboneSpec,
    pub store: ParamStore,
    pub blocks: Vec<BlockParams>,
    pub heads: Vec<Head>,
}

/// Stable per-task RNG stream so head init does not depend on attachment order.
fn task_stream(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn add_head(store: &mut ParamStore, spec: &HeadSpec, width: usize, tap: usize, seed: u64) -> Result<Head> {
    if spec.out_channels == 0 || spec.hidden == 0 {
        return Err(Error::InvalidArgument(format!(
            "head `{}` needs positive hidden and output sizes",
            spec.task_name
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task_stream(&spec.task_name));
    let name = &spec.task_name;
    let layers = match spec.kind {
        HeadKind::DenseDecoder => {
            let w1 = store.add_head(format!("head.{name}.conv1.weight"), he(&[spec.hidden, width, 3, 3], width * 9, 1.0, &mut rng));
            let b1 = store.add_head(format!("head.{name}.conv1.bias"), Tensor::zeros(&[spec.hidden]));
            let w2 = store.add_head(
                format!("head.{name}.conv2.weight"),
                he(&[spec.out_channels, spec.hidden, 1, 1], spec.hidden, 0.5, &mut rng),
            );
            let b2 = store.add_head(format!("head.{name}.conv2.bias"), Tensor::zeros(&[spec.out_channels]));
            [(w1, b1), (w2, b2)]
        }
        HeadKind::Classifier => {
            let w1 = store.add_head(format!("head.{name}.fc1.weight"), he(&[spec.hidden, width], width, 1.0, &mut rng));
            let b1 = store.add_head(format!("head.{name}.fc1.bias"), Tensor::zeros(&[spec.hidden]));
            let w2 = store.add_head(
                format!("head.{name}.fc2.weight"),
                he(&[spec.out_channels, spec.hidden], spec.hidden, 0.5, &mut rng),
            );
            let b2 = store.add_head(format!("head.{name}.fc2.bias"), Tensor::zeros(&[spec.out_channels]));
            [(w1, b1), (w2, b2)]
        }
    };
    Ok(Head {
        spec: spec.clone(),
        tap,
        layers,
    })
}

/// Wires heads at their taps, drops backbone blocks deeper than the deepest
/// tap and initializes the heads from `seed`.
pub fn assemble_model(backbone: Backbone, attachments: &[(HeadSpec, usize)], seed: u64) -> Result<ModelGraph> {
    if attachments.is_empty() {
        return Err(Error::InvalidArgument("a model needs at least one head".into()));
    }
    let mut names = BTreeSet::new();
    for (h, tap) in attachments {
        if *tap >= backbone.blocks.len() {
            return Err(Error::UnknownTap(*tap));
        }
        if !names.insert(h.task_name.as_str()) {
            return Err(Error::DuplicateTask(h.task_name.clone()));
        }
    }
    let deepest = attachments.iter().map(|(_, t)| *t).max().expect("non-empty");

    let mut store = ParamStore::new();
    let mut remap: BTreeMap<ParamId, ParamId> = BTreeMap::new();
    for p in backbone.store.iter() {
        let layer = p.layer_id.expect("backbone parameter");
        if layer > deepest {
            continue;
        }
        let id = match p.group_with {
            Some(w) => store.add_backbone_bias(p.name.clone(), p.tensor.clone(), remap[&w]),
            None => store.add_backbone(p.name.clone(), p.tensor.clone(), layer, p.penalizable),
        };
        remap.insert(p.id, id);
    }
    let map_conv = |c: &ConvParams| ConvParams {
        weight: remap[&c.weight],
        bias: c.bias.map(|b| remap[&b]),
        geom: c.geom,
    };
    let blocks: Vec<BlockParams> = backbone.blocks[..=deepest]
        .iter()
        .map(|b| BlockParams {
            projection: b.projection.as_ref().map(map_conv),
            conv_a: map_conv(&b.conv_a),
            conv_b: map_conv(&b.conv_b),
        })
        .collect();

    let mut spec = backbone.spec.clone();
    spec.blocks.truncate(deepest + 1);
    let mut heads = Vec::with_capacity(attachments.len());
    for (h, tap) in attachments {
        let width = spec.blocks[*tap].width;
        heads.push(add_head(&mut store, h, width, *tap, seed)?);
    }
    Ok(ModelGraph {
        backbone_spec: spec,
        store,
        blocks,
        heads,
    })
}

impl ModelGraph {
    /// Raw head outputs (logits / regressions) keyed by task.
    pub fn forward(&self, g: &mut Graph, input: NodeId) -> Result<BTreeMap<String, NodeId>> {
        let in_shape = g.value(input).shape().to_vec();
        let feats = run_blocks(g, &self.store, &self.blocks, input, None)?;
        let mut out = BTreeMap::new();
        for head in &self.heads {
            let x = g.relu(feats[head.tap])?;
            let [(w1, b1), (w2, b2)] = head.layers;
            let y = match head.spec.kind {
                HeadKind::DenseDecoder => {
                    let c1 = ConvParams {
                        weight: w1,
                        bias: Some(b1),
                        geom: ConvGeometry::same(3, 1),
                    };
                    let c2 = ConvParams {
                        weight: w2,
                        bias: Some(b2),
                        geom: ConvGeometry::default(),
                    };
                    let h = conv(g, &self.store, x, &c1)?;
                    let h = g.relu(h)?;
                    let mut y = conv(g, &self.store, h, &c2)?;
                    let fh = g.value(y).shape()[2];
                    if fh < in_shape[2] {
                        y = g.nearest_upsample(y, in_shape[2] / fh)?;
                    }
                    y
                }
                HeadKind::Classifier => {
                    let p = g.global_avg_pool(x)?;
                    let (w1, b1) = (g.param(&self.store, w1)?, g.param(&self.store, b1)?);
                    let h = g.affine(p, w1, b1)?;
                    let h = g.relu(h)?;
                    let (w2, b2) = (g.param(&self.store, w2)?, g.param(&self.store, b2)?);
                    g.affine(h, w2, b2)?
                }
            };
            g.set_output(head.spec.task_name.clone(), y);
            out.insert(head.spec.task_name.clone(), y);
        }
        Ok(out)
    }

    pub fn taps(&self) -> TapSelection {
        TapSelection {
            taps: self
                .heads
                .iter()
                .map(|h| (h.spec.task_name.clone(), h.tap))
                .collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn head(&self, task: &str) -> Option<&Head> {
        self.heads.iter().find(|h| h.spec.task_name == task)
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count(Some(Role::Backbone)) + self.store.count(Some(Role::Head))
    }

    pub fn backbone_parameter_count(&self) -> usize {
        self.store.count(Some(Role::Backbone))
    }

    pub fn backbone_nonzero_count(&self) -> usize {
        self.store.count_nonzero(Some(Role::Backbone))
    }

    pub fn theta_b(&self) -> Vec<ParamId> {
        self.store.iter().filter(|p| p.role == Role::Backbone).map(|p| p.id).collect()
    }

    pub fn theta_t(&self) -> Vec<ParamId> {
        self.store.iter().filter(|p| p.role == Role::Head).map(|p| p.id).collect()
    }

    pub fn zero_block(&mut self, block: usize) {
        zero_layer(&mut self.store, block);
    }

    /// True when every head sits on the final block of an untruncated backbone.
    pub fn is_dense_equivalent(&self, full_depth: usize) -> bool {
        self.blocks.len() == full_depth && self.heads.iter().all(|h| h.tap + 1 == full_depth)
    }
}

/// Tap per task = last active layer of that task's sparse single-task pattern.
pub fn plan_lomt(patterns: &BTreeMap<String, SparsityPattern>) -> Result<TapSelection> {
    let mut signature = None;
    let mut taps = BTreeMap::new();
    for (task, p) in patterns {
        let sig = p.signature();
        match &signature {
            None => signature = Some(sig),
            Some(s) if *s != sig => {
                return Err(Error::Shape(format!(
                    "pattern for `{task}` was produced by a different backbone"
                )))
            }
            _ => {}
        }
        taps.insert(task.clone(), last_active_layer(p)?);
    }
    Ok(TapSelection { taps })
}
