use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nextvlad::metrics::{gap_at_20, topk_predictions};
use nextvlad::{SplitMix64, Tensor};
use nextvlad_bench::random_predictions;

fn gap(c: &mut Criterion) {
    let mut g = c.benchmark_group("gap_at_20");
    for videos in [1_000, 10_000] {
        let set = random_predictions(videos, 100, 3);
        g.bench_with_input(BenchmarkId::from_parameter(videos), &set, |b, s| b.iter(|| gap_at_20(black_box(s)).unwrap()));
    }
    g.finish();
}

fn topk(c: &mut Criterion) {
    let scores = Tensor::<f32>::randn([1_000, 400], 1.0, &mut SplitMix64::new(4));
    c.bench_function("topk_1000x400", |b| b.iter(|| topk_predictions(black_box(&scores), 20).unwrap()));
}

criterion_group!(benches, gap, topk);
criterion_main!(benches);
