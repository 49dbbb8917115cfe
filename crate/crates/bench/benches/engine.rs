use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use splitgnn_bench::scaled_benchmark;
use splitgnn_core::models::{Encoder, EncoderConfig, ForwardCtx, ModelKind};
use splitgnn_core::nn::{init_rng, xavier};
use splitgnn_core::Tape;

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256] {
        let mut rng = init_rng(1, &[]);
        let a = xavier(&mut rng, n, n, &[n, n]);
        let b = xavier(&mut rng, n, n, &[n, n]);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (x, y) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
                let z = tape.matmul(x, y).unwrap();
                let s = tape.sum(z);
                black_box(tape.backward(s).unwrap());
            })
        });
    }
    g.finish();
}

fn encoders(c: &mut Criterion) {
    let bundle = scaled_benchmark(4);
    let batch: Vec<usize> = bundle.splits.train[..128].to_vec();
    let mut g = c.benchmark_group("encoder_step");
    g.sample_size(10);
    for kind in [ModelKind::Gcn, ModelKind::Gat, ModelKind::Hat] {
        let cfg = EncoderConfig {
            kind,
            hidden: 32,
            ..Default::default()
        };
        let enc = Encoder::new(&cfg, &bundle.graph.schema(), &bundle.metapaths, 1).unwrap();
        let plan = enc.plan(&bundle.graph, &batch, None).unwrap();
        g.bench_function(format!("{kind:?}").to_lowercase(), |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let bound = enc.params().register(&mut tape);
                let h = enc.forward(&mut tape, &bound, &bundle.graph, &plan, ForwardCtx::eval()).unwrap();
                let s = tape.sum(h);
                black_box(tape.backward(s).unwrap());
            })
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, encoders);
criterion_main!(benches);
