//! Central finite differences against the reverse sweep for every op, each
//! loss, the uncertainty-weighted objective and a whole multi-task model.

use std::collections::BTreeMap;

use lomt_core::train::combined_loss_value;
use lomt_core::{
    build_mtl_model, combined_loss, finite_diff_check, BackboneSpec, ConvGeometry, Graph, LossKind, NodeId, ParamId,
    ParamStore, Result, TapSelection, TaskSpec, Tensor, UncertaintyWeights,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const SEEDS: u64 = 5;
const POINTS: u64 = 10;
/// Relu inputs closer than this to zero make a draw unusable.
const KINK: f64 = 1e-3;

type Build = Box<dyn Fn(&ParamStore) -> Result<(Graph, NodeId)>>;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Scalar readout with random weights, so no gradient entry is degenerate.
fn readout(g: &mut Graph, x: NodeId, w: &Tensor) -> Result<NodeId> {
    let c = g.constant(w.clone())?;
    let p = g.mul(x, c)?;
    g.sum(p)
}

/// Worst relative error over `SEEDS x POINTS` draws of `setup`.
fn worst_error(setup: impl Fn(&mut ChaCha8Rng) -> (ParamStore, Build)) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        for point in 0..POINTS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(point);
            let (mut store, build) = loop {
                let (store, build) = setup(&mut rng);
                let (g, _) = build(&store).unwrap();
                if g.relu_margin() >= KINK {
                    break (store, build);
                }
            };
            let err = finite_diff_check(&mut store, EPS, |s| build(s)).unwrap();
            worst = worst.max(err);
        }
    }
    worst
}

fn assert_op(name: &str, tol: f64, setup: impl Fn(&mut ChaCha8Rng) -> (ParamStore, Build)) {
    let err = worst_error(setup);
    assert!(err < tol, "{name}: max relative error {err:e}");
}

fn conv_case(geom: ConvGeometry, size: usize) -> impl Fn(&mut ChaCha8Rng) -> (ParamStore, Build) {
    move |rng| {
        let mut store = ParamStore::new();
        let x = store.add_head("x", randn(rng, &[2, 2, size, size]));
        let w = store.add_head("w", randn(rng, &[3, 2, 3, 3]));
        let b = store.add_head("b", randn(rng, &[3]));
        let mut probe = Graph::new();
        let (xn, wn, bn) = (
            probe.param(&store, x).unwrap(),
            probe.param(&store, w).unwrap(),
            probe.param(&store, b).unwrap(),
        );
        let out = probe.conv2d(xn, wn, bn, geom).unwrap();
        let r = randn(rng, probe.value(out).shape());
        let build: Build = Box::new(move |s| {
            let mut g = Graph::new();
            let (xn, wn, bn) = (g.param(s, x)?, g.param(s, w)?, g.param(s, b)?);
            let y = g.conv2d(xn, wn, bn, geom)?;
            let l = readout(&mut g, y, &r)?;
            Ok((g, l))
        });
        (store, build)
    }
}

#[test]
fn conv2d_same_padding() {
    assert_op("conv2d", 1e-4, conv_case(ConvGeometry::same(3, 1), 5));
}

#[test]
fn conv2d_dilated() {
    assert_op("conv2d dilated", 1e-4, conv_case(ConvGeometry::same(3, 2), 6));
}

#[test]
fn conv2d_strided_unpadded() {
    let geom = ConvGeometry {
        stride: 2,
        padding: 0,
        dilation: 1,
    };
    assert_op("conv2d strided", 1e-4, conv_case(geom, 7));
}

/// One-input elementwise or reshaping op applied to a random `[2, 3, 4, 4]` tensor.
fn unary(op: fn(&mut Graph, NodeId) -> Result<NodeId>) -> impl Fn(&mut ChaCha8Rng) -> (ParamStore, Build) {
    move |rng| {
        let mut store = ParamStore::new();
        let x = store.add_head("x", randn(rng, &[2, 3, 4, 4]));
        let mut probe = Graph::new();
        let xn = probe.param(&store, x).unwrap();
        let y = op(&mut probe, xn).unwrap();
        let r = randn(rng, probe.value(y).shape());
        let build: Build = Box::new(move |s| {
            let mut g = Graph::new();
            let xn = g.param(s, x)?;
            let y = op(&mut g, xn)?;
            let l = readout(&mut g, y, &r)?;
            Ok((g, l))
        });
        (store, build)
    }
}

#[test]
fn relu_away_from_kinks() {
    assert_op("relu", 1e-4, unary(|g, x| g.relu(x)));
}

#[test]
fn scale_and_exp() {
    assert_op("scale", 1e-4, unary(|g, x| g.scale(x, -1.7)));
    assert_op("exp", 1e-4, unary(|g, x| g.exp(x)));
}

#[test]
fn pooling_and_upsampling() {
    assert_op("avg_pool", 1e-4, unary(|g, x| g.avg_pool(x, 2)));
    assert_op("global_avg_pool", 1e-4, unary(|g, x| g.global_avg_pool(x)));
    assert_op("nearest_upsample", 1e-4, unary(|g, x| g.nearest_upsample(x, 2)));
}

#[test]
fn sum_of_products_and_residual_add() {
    let setup = |rng: &mut ChaCha8Rng| {
        let mut store = ParamStore::new();
        let a = store.add_head("a", randn(rng, &[3, 4]));
        let b = store.add_head("b", randn(rng, &[3, 4]));
        let r = randn(rng, &[3, 4]);
        let build: Build = Box::new(move |s| {
            let mut g = Graph::new();
            let (an, bn) = (g.param(s, a)?, g.param(s, b)?);
            let p = g.mul(an, bn)?;
            let q = g.add(p, an)?;
            let l = readout(&mut g, q, &r)?;
            Ok((g, l))
        });
        (store, build)
    };
    assert_op("mul/add", 1e-4, setup);
}

#[test]
fn affine_layer() {
    let setup = |rng: &mut ChaCha8Rng| {
        let mut store = ParamStore::new();
        let x = store.add_head("x", randn(rng, &[4, 5]));
        let w = store.add_head("w", randn(rng, &[3, 5]));
        let b = store.add_head("b", randn(rng, &[3]));
        let r = randn(rng, &[4, 3]);
        let build: Build = Box::new(move |s| {
            let mut g = Graph::new();
            let (xn, wn, bn) = (g.param(s, x)?, g.param(s, w)?, g.param(s, b)?);
            let y = g.affine(xn, wn, bn)?;
            let l = readout(&mut g, y, &r)?;
            Ok((g, l))
        });
        (store, build)
    };
    assert_op("affine", 1e-4, setup);
}

fn loss_case(kind: LossKind) -> impl Fn(&mut ChaCha8Rng) -> (ParamStore, Build) {
    move |rng| {
        let mut store = ParamStore::new();
        let (pred_shape, target) = match kind {
            LossKind::Mse => (vec![2, 1, 4, 4], randn(rng, &[2, 1, 4, 4])),
            LossKind::SigmoidBce => {
                let t: Vec<f64> = (0..32).map(|_| rng.gen_range(0.0..1.0)).collect();
                (vec![2, 1, 4, 4], Tensor::new(vec![2, 1, 4, 4], t).unwrap())
            }
            LossKind::SoftmaxCe => {
                let t: Vec<f64> = (0..32).map(|_| rng.gen_range(0..3) as f64).collect();
                (vec![2, 3, 4, 4], Tensor::new(vec![2, 4, 4], t).unwrap())
            }
            LossKind::Cosine => (vec![2, 3, 4, 4], randn(rng, &[2, 3, 4, 4])),
        };
        let p = store.add_head("pred", randn(rng, &pred_shape));
        let build: Build = Box::new(move |s| {
            let mut g = Graph::new();
            let pn = g.param(s, p)?;
            let l = g.loss(kind, pn, &target)?;
            Ok((g, l))
        });
        (store, build)
    }
}

#[test]
fn every_loss_kind() {
    for kind in [LossKind::Mse, LossKind::SigmoidBce, LossKind::SoftmaxCe, LossKind::Cosine] {
        assert_op(&format!("{kind:?}"), 1e-4, loss_case(kind));
    }
}

fn tasks(names: &[&str]) -> Vec<TaskSpec> {
    names.iter().map(|n| TaskSpec::by_name(n).unwrap()).collect()
}

#[test]
fn uncertainty_weighted_objective() {
    let specs = tasks(&["edge", "distance", "classification"]);
    let setup = move |rng: &mut ChaCha8Rng| {
        let mut store = ParamStore::new();
        let inputs: Vec<(String, ParamId)> = specs
            .iter()
            .map(|t| (t.name.clone(), store.add_head(format!("{}.x", t.name), randn(rng, &[4]))))
            .collect();
        let weights = UncertaintyWeights::register(&mut store, &specs);
        for id in weights.eta.values() {
            store.tensor_mut(*id).data_mut()[0] = rng.gen_range(-1.5..1.5);
        }
        let build: Build = Box::new(move |s| {
            let mut g = Graph::new();
            let mut losses = BTreeMap::new();
            for (name, id) in &inputs {
                let x = g.param(s, *id)?;
                let sq = g.mul(x, x)?;
                losses.insert(name.clone(), g.sum(sq)?);
            }
            let l = combined_loss(&mut g, s, &losses, &weights)?;
            Ok((g, l))
        });
        (store, build)
    };
    assert_op("combined_loss", 1e-6, setup);
}

#[test]
fn combined_value_matches_graph() {
    let specs = tasks(&["edge", "distance"]);
    let mut store = ParamStore::new();
    let weights = UncertaintyWeights::register(&mut store, &specs);
    let eta = [0.3, -0.8];
    for (id, e) in weights.eta.values().zip(eta) {
        store.tensor_mut(*id).data_mut()[0] = e;
    }
    let mut g = Graph::new();
    let mut losses = BTreeMap::new();
    // BTreeMap order: distance, edge
    losses.insert("distance".to_owned(), g.constant(Tensor::scalar(2.0)).unwrap());
    losses.insert("edge".to_owned(), g.constant(Tensor::scalar(0.5)).unwrap());
    let l = combined_loss(&mut g, &store, &losses, &weights).unwrap();
    let expected = combined_loss_value(&[2.0, 0.5], &eta);
    assert!((g.value(l).item() - expected).abs() < 1e-14);
}

#[test]
fn whole_multi_task_model() {
    let specs = tasks(&["edge", "segmentation", "classification"]);
    let spec = BackboneSpec::desk(1, 3, 3);
    let mut worst: f64 = 0.0;
    let mut used = 0;
    for seed in 0..200 {
        if used == SEEDS {
            break;
        }
        let taps = TapSelection {
            taps: [("edge", 0), ("segmentation", 1), ("classification", 2)]
                .into_iter()
                .map(|(t, l)| (t.to_owned(), l))
                .collect(),
        };
        let mut model = build_mtl_model(&spec, &specs, &taps, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        // nonzero biases move relu inputs off exact zeros in padded borders
        for p in model.store.iter_mut() {
            for v in p.tensor.data_mut() {
                if *v == 0.0 {
                    *v = rng.gen_range(-0.3..0.3);
                }
            }
        }
        let weights = UncertaintyWeights::register(&mut model.store, &specs);
        let image = Tensor::randn(&[2, 1, 6, 6], 1.0, &mut rng);
        let edge = Tensor::new(vec![2, 1, 6, 6], (0..72).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let seg = Tensor::new(vec![2, 6, 6], (0..72).map(|_| rng.gen_range(0..3) as f64).collect()).unwrap();
        let label = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let targets = [("edge", edge), ("segmentation", seg), ("classification", label)];
        let heads = model.clone();
        let build = |s: &ParamStore| -> Result<(Graph, NodeId)> {
            let mut m = heads.clone();
            m.store = s.clone();
            let mut g = Graph::new();
            let x = g.constant(image.clone())?;
            let outs = m.forward(&mut g, x)?;
            let mut losses = BTreeMap::new();
            for (task, target) in &targets {
                let t = specs.iter().find(|t| t.name == *task).unwrap();
                losses.insert(task.to_string(), g.loss(t.loss, outs[*task], target)?);
            }
            let l = combined_loss(&mut g, s, &losses, &weights)?;
            Ok((g, l))
        };
        let (g, _) = build(&model.store).unwrap();
        if g.relu_margin() < KINK {
            continue;
        }
        worst = worst.max(finite_diff_check(&mut model.store, EPS, build).unwrap());
        used += 1;
    }
    assert_eq!(used, SEEDS, "too few draws clear of relu kinks");
    assert!(worst < 1e-4, "max relative error {worst:e}");
}
