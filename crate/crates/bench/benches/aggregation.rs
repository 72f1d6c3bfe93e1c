use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nextvlad::params::bind;
use nextvlad::vlad::{netvlad_forward, nextvlad_forward};
use nextvlad::{NeXtVladConfig, NetVladConfig, Tape};
use nextvlad_bench::{desk_batch, netvlad_params, nextvlad_params};

fn forward(c: &mut Criterion) {
    let batch = desk_batch(32, 20);
    let next_cfg = NeXtVladConfig::new(64, 2, 4, 8, 128).unwrap();
    let next = nextvlad_params(&next_cfg, 1);
    let net_cfg = NetVladConfig::new(64, 5, 128).unwrap();
    let net = netvlad_params(&net_cfg, 1);

    let mut g = c.benchmark_group("aggregation_forward");
    g.bench_function("nextvlad_l2_g4_k8", |b| b.iter(|| nextvlad_forward(black_box(&batch.visual), &next).unwrap()));
    g.bench_function("netvlad_k5", |b| b.iter(|| netvlad_forward(black_box(&batch.visual), &net).unwrap()));
    g.finish();
}

fn backward(c: &mut Criterion) {
    let batch = desk_batch(32, 20);
    let cfg = NeXtVladConfig::new(64, 2, 4, 8, 128).unwrap();
    let params = nextvlad_params(&cfg, 2);
    c.bench_function("nextvlad_forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let p = bind(&mut tape, &params);
            let x = tape.constant(batch.visual.frames.clone());
            let m = tape.constant(batch.visual.mask.clone());
            let y = p.forward(&mut tape, x, m).unwrap();
            let s = tape.sum_all(y).unwrap();
            black_box(tape.backward(s).unwrap())
        })
    });
}

criterion_group!(benches, forward, backward);
criterion_main!(benches);
