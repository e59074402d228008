use std::hint::black_box;

use adagraph::{BnMode, Conditioning, Loss, RefineMode, RefinementBuffer, RefinementEngine};
use adagraph_bench::fixture;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn forward_backward(c: &mut Criterion) {
    let f = fixture(18, 16);
    let mut g = c.benchmark_group("forward_backward");
    for (name, graph) in [("plain", None), ("graph", Some(&f.graph))] {
        g.bench_function(name, |b| {
            b.iter(|| {
                let mut net = f.net.clone();
                let pass = net
                    .forward_pass(f.batch.view(), Conditioning::new(f.target, graph), BnMode::Train)
                    .unwrap();
                black_box(net.backward(&pass, &Loss::CrossEntropy(&f.labels), 1.0).unwrap())
            })
        });
    }
    g.bench_function("predict", |b| {
        b.iter(|| black_box(f.net.predict(f.batch.view(), f.target, None).unwrap()))
    });
    g.finish();
}

fn propagation(c: &mut Criterion) {
    let mut g = c.benchmark_group("propagate_params");
    for domains in [4u32, 18, 50] {
        let f = fixture(domains, 2);
        g.bench_with_input(BenchmarkId::from_parameter(domains), &f.graph, |b, graph| {
            b.iter(|| {
                let mut graph = graph.clone();
                black_box(graph.propagate_params(f.target).unwrap())
            })
        });
    }
    g.finish();
}

fn refinement(c: &mut Criterion) {
    let f = fixture(18, 16);
    let rows: Vec<Vec<f64>> = f.batch.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut g = c.benchmark_group("refinement");
    for (name, mode) in [("stats", RefineMode::Stats), ("full", RefineMode::Full)] {
        // One buffer's worth of samples: 16 predictions and one update.
        g.bench_function(name, |b| {
            b.iter(|| {
                let buffer = RefinementBuffer::new(16, 0.1, 1e-3).unwrap();
                let mut e = RefinementEngine::new(f.net.clone(), f.target, buffer, mode).unwrap();
                for x in &rows {
                    black_box(e.step(x).unwrap());
                }
            })
        });
    }
    g.finish();
}

criterion_group!(benches, forward_backward, propagation, refinement);
criterion_main!(benches);
