//! Layer-optimal multi-task learning: group-sparse single-task training to
//! find how deep each task needs to go, then a shared backbone with heads
//! attached at those depths.

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod prox;
pub mod tensor;
pub mod train;

pub use analysis::{
    compression_ratio, extract_pattern, last_active_layer, render_pattern, CompressionReport, LayerFlags,
    RenderedPattern, SparsityPattern, TapSelection,
};
pub use autodiff::{finite_diff_check, ConvGeometry, Graph, LayerKind, LossKind, NodeId};
pub use data::{generate_dataset, load_manifest, export_dataset, Dataset, Sample, SceneConfig, Split, TargetKey};
pub use error::{Error, Result};
pub use metrics::MetricKind;
pub use model::{
    assemble_model, build_backbone, plan_lomt, Backbone, BackboneSpec, BlockSpec, HeadKind, HeadSpec, ModelGraph,
};
pub use params::{Gradients, ParamId, ParamStore, Parameter, Role};
pub use prox::{
    build_channel_groups, prox_group, prox_step, sparsity_stats, GroupIndex, OptimizerConfig, ProxSgd,
    SparsityStats,
};
pub use tensor::Tensor;
pub use train::{
    aggregate_runs, build_mtl_model, combined_loss, dense_taps, evaluate, train_phase1, train_phase2, EpochRecord,
    MetricReport, Phase1Outcome, Phase2Outcome, RunAggregate, TaskSpec, TrainConfig, UncertaintyWeights,
};
