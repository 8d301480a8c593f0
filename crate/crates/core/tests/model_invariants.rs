use std::collections::BTreeMap;

use lomt_core::{
    build_backbone, build_channel_groups, build_mtl_model, dense_taps, extract_pattern, plan_lomt, BackboneSpec,
    Graph, ModelGraph, TaskSpec, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn input(seed: u64, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[2, 1, size, size], 1.0, &mut rng)
}

fn outputs(model: &ModelGraph, x: &Tensor) -> BTreeMap<String, Vec<u64>> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone()).unwrap();
    model
        .forward(&mut g, xn)
        .unwrap()
        .into_iter()
        .map(|(t, n)| (t, g.value(n).data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn zeroed_block_passes_its_input_through() {
    for bias in [true, false] {
        let spec = BackboneSpec::desk(1, 6, 5).with_branch_bias(bias);
        for block in 0..spec.depth() {
            let mut bb = build_backbone(&spec, 40 + block as u64).unwrap();
            bb.zero_block(block);
            let x = input(block as u64, 10);
            let mut g = Graph::new();
            let xn = g.constant(x.clone()).unwrap();
            let zeroed = bb.forward(&mut g, xn).unwrap();
            let mut h = Graph::new();
            let xh = h.constant(x).unwrap();
            let skipped = bb.forward_without_branch(&mut h, xh, block).unwrap();
            for (a, b) in zeroed.iter().zip(&skipped) {
                let diff = g.value(*a).max_abs_diff(h.value(*b));
                assert!(diff < 1e-12, "block {block}, bias {bias}: {diff}");
            }
        }
    }
}

#[test]
fn zeroed_block_changes_nothing_downstream_of_the_skip() {
    // Zeroing the last block's branch leaves the output equal to block 4's output.
    let spec = BackboneSpec::desk(1, 4, 6);
    let mut bb = build_backbone(&spec, 9).unwrap();
    bb.zero_block(5);
    let mut g = Graph::new();
    let xn = g.constant(input(3, 8)).unwrap();
    let outs = bb.forward(&mut g, xn).unwrap();
    assert_eq!(g.value(outs[4]).data(), g.value(outs[5]).data());
}

fn presets(names: &[&str]) -> Vec<TaskSpec> {
    names.iter().map(|n| TaskSpec::by_name(n).unwrap()).collect()
}

#[test]
fn dense_patterns_plan_the_dense_model() {
    let spec = BackboneSpec::desk(1, 6, 4);
    let tasks = presets(&["edge", "segmentation", "distance"]);
    // every task's phase-1 pattern is fully dense (an untouched init)
    let patterns: BTreeMap<String, _> = tasks
        .iter()
        .map(|t| {
            let bb = build_backbone(&spec, 1).unwrap();
            let index = build_channel_groups(&bb.store, 1e-3);
            (t.name.clone(), extract_pattern(&bb.store, &index, &t.name, 1e-3, 1).unwrap())
        })
        .collect();
    let plan = plan_lomt(&patterns).unwrap();
    assert_eq!(plan, dense_taps(&spec, &tasks));

    for seed in 0..3 {
        let lomt = build_mtl_model(&spec, &tasks, &plan, seed).unwrap();
        let dense = build_mtl_model(&spec, &tasks, &dense_taps(&spec, &tasks), seed).unwrap();
        assert!(lomt.is_dense_equivalent(spec.depth()));
        assert_eq!(lomt.parameter_count(), dense.parameter_count());
        assert_eq!(lomt.backbone_parameter_count(), dense.backbone_parameter_count());
        let x = input(seed, 12);
        assert_eq!(outputs(&lomt, &x), outputs(&dense, &x));
    }
}

#[test]
fn shallow_taps_truncate_the_backbone() {
    let spec = BackboneSpec::desk(1, 6, 6);
    let tasks = presets(&["edge", "classification"]);
    let mut plan = dense_taps(&spec, &tasks);
    plan.taps.insert("edge".into(), 0);
    plan.taps.insert("classification".into(), 2);
    let m = build_mtl_model(&spec, &tasks, &plan, 0).unwrap();
    assert_eq!(m.depth(), 3);
    // block 0: projection (6*1*9 + 6) + two branch convs (6*6*9 + 6 each); blocks 1, 2: branch convs
    let branch = 2 * (6 * 6 * 9 + 6);
    assert_eq!(m.backbone_parameter_count(), (6 * 9 + 6) + 3 * branch);
    let full = build_mtl_model(&spec, &tasks, &dense_taps(&spec, &tasks), 0).unwrap();
    assert_eq!(full.backbone_parameter_count() - m.backbone_parameter_count(), 3 * branch);
    // head inits are keyed by task, not by where the head sits
    let hw = |m: &ModelGraph| m.store.tensor(m.head("classification").unwrap().layers[1].0).clone();
    assert_eq!(hw(&m), hw(&full));
}
