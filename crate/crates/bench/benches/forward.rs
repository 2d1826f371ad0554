use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use resgcn::blocks::spatial_gcn;
use resgcn::graph::{build_adjacency, SkeletonGraph};
use resgcn::model::Batch;
use resgcn::nn::Mode;
use resgcn::{Tape, Tensor};
use resgcn_bench::{branches, model};

const FRAMES: usize = 64;
const BATCH: usize = 8;

fn forward(c: &mut Criterion) {
    let items = branches(BATCH, FRAMES);
    let refs: Vec<_> = items.iter().collect();
    let batch = Batch::from_branches(&refs).unwrap();
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    for (name, attention) in [("desk", false), ("desk_partatt", true)] {
        let m = model("[B1,N1,N1,N1]", &[8, 8, 16, 32], attention, &batch);
        group.bench_function(name, |b| b.iter(|| m.predict(&batch).unwrap()));
    }
    let m = model("[B1,N2,N3,N3]", &[64, 32, 128, 256], true, &batch);
    group.bench_function("pa_n51", |b| b.iter(|| m.predict(&batch).unwrap()));
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let items = branches(BATCH, FRAMES);
    let refs: Vec<_> = items.iter().collect();
    let batch = Batch::from_branches(&refs).unwrap();
    let labels: Vec<usize> = items.iter().map(|b| b.label.unwrap()).collect();
    let m = model("[B1,N1,N1,N1]", &[8, 8, 16, 32], true, &batch);
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("desk_partatt", |b| {
        b.iter_batched(
            Tape::new,
            |mut tape| {
                let out = m.forward(&mut tape, &batch, Mode::Train).unwrap();
                let loss = tape.cross_entropy(out.logits, &labels).unwrap();
                tape.backward(loss).unwrap();
                tape
            },
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn graph_conv(c: &mut Criterion) {
    let g = SkeletonGraph::ntu25();
    let adj = build_adjacency(&g.edges, 25, 2).unwrap();
    let x = Tensor::ones(&[BATCH, 64, FRAMES, 25]);
    let w = Tensor::full(&[64, 64], 0.01);
    c.bench_function("spatial_gcn_64x64", |b| {
        b.iter(|| {
            let mut tape = Tape::inference();
            let xv = tape.constant(x.clone());
            let ws: Vec<_> = (0..3).map(|_| tape.constant(w.clone())).collect();
            let av: Vec<_> = adj.normalized.iter().map(|a| tape.constant(a.clone())).collect();
            let out = spatial_gcn(&mut tape, xv, &ws, &av).unwrap();
            tape.value(out).sum()
        })
    });
}

criterion_group!(benches, forward, train_step, graph_conv);
criterion_main!(benches);
