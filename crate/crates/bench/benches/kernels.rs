use criterion::{criterion_group, criterion_main, Criterion};
use rili_bench::{phantom_volume, random_tensor, scores_and_labels};
use rili_core::metrics::roc_auc;
use rili_core::volume::resample;
use rili_core::Graph;
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let a = random_tensor([8, 65, 64], 1);
    let b = random_tensor([64, 256], 2);
    c.bench_function("matmul_fwd_bwd_8x65x64x256", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let x = g.leaf(&a, true);
            let w = g.leaf(&b, true);
            let y = g.matmul(x, w).unwrap();
            let s = g.sum(y).unwrap();
            black_box(g.backward(s).unwrap());
        })
    });
}

fn auc(c: &mut Criterion) {
    let (scores, labels) = scores_and_labels(1000, 3);
    c.bench_function("roc_auc_1000", |b| b.iter(|| roc_auc(black_box(&scores), black_box(&labels)).unwrap()));
}

fn resampling(c: &mut Criterion) {
    let v = phantom_volume([96, 96, 40], 4);
    c.bench_function("resample_96x96x40_to_1x1x2", |b| {
        b.iter(|| resample(black_box(&v), [1.0, 1.0, 2.0], -1000.0).unwrap())
    });
}

criterion_group!(benches, matmul, auc, resampling);
criterion_main!(benches);
