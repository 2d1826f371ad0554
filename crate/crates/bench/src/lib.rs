//! Shared fixtures for the criterion benches in `benches/`.

use resgcn::dataset::synth_dataset;
use resgcn::graph::SkeletonGraph;
use resgcn::model::{build_model, parse_structure, Batch, ModelSpec, ResGcnModel};
use resgcn::nn::Mode;
use resgcn::preprocess::{build_branches, Branches};
use resgcn::Tape;

/// `count` preprocessed synthetic sequences of `frames` frames.
pub fn branches(count: usize, frames: usize) -> Vec<Branches> {
    let g = SkeletonGraph::ntu25();
    let per_class = count.div_ceil(4);
    let data = synth_dataset(4, per_class, frames, 0).expect("synthetic data");
    data.sequences.iter().take(count).map(|s| build_branches(s, &g).expect("branches")).collect()
}

/// A model with populated running statistics, ready for eval-mode forwards.
pub fn model(structure: &str, plan: &[usize], attention: bool, warmup: &Batch) -> ResGcnModel {
    let spec = ModelSpec {
        structure: parse_structure(structure).expect("structure"),
        channel_plan: plan.to_vec(),
        num_classes: 4,
        with_part_attention: attention,
        ..Default::default()
    };
    let mut m = build_model(&spec, &SkeletonGraph::ntu25(), 0).expect("model");
    let mut tape = Tape::new();
    let out = m.forward(&mut tape, warmup, Mode::Train).expect("forward");
    m.apply_stat_updates(&out.updates);
    m
}
