//! Benchmarks for the hot paths: interpolation, deformable attention, and a
//! small end-to-end forward pass.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::hint::black_box;

use ssc_bench::{bench_config, bench_sample, random_tensor};
use ssc_core::attention::DeformableAttnParams;
use ssc_core::numerics::{bilinear_sample, trilinear_sample};
use ssc_core::pipeline::{forward_pipeline, MultiScaleFeatures, PipelineParams};

fn interpolation(c: &mut Criterion) {
    let fmap = random_tensor(&[48, 64, 32], 1);
    c.bench_function("bilinear_sample_32ch", |b| {
        b.iter(|| bilinear_sample(black_box(&fmap), black_box([0.371, 0.642])).unwrap())
    });
    let vol = random_tensor(&[32, 32, 8, 32], 2);
    c.bench_function("trilinear_sample_32ch", |b| {
        b.iter(|| trilinear_sample(black_box(&vol), black_box([0.371, 0.642, 0.5])).unwrap())
    });
}

fn deformable(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let dim = 32;
    let params = DeformableAttnParams::init(dim, 4, 2, 2, 2, &mut rng).unwrap();
    let queries = random_tensor(&[64, dim], 4);
    let refs = ssc_core::Tensor::from_fn(&[64, 2], |idx| 0.1 + 0.01 * idx[0] as f64);
    let features = vec![random_tensor(&[48, 64, dim], 5), random_tensor(&[24, 32, dim], 6)];
    c.bench_function("deformable_attn_2d_64q", |b| {
        b.iter(|| {
            ssc_core::attention::deformable_attn_2d(
                black_box(&params),
                black_box(&queries),
                black_box(&refs),
                black_box(&features),
            )
            .unwrap()
        })
    });
}

fn forward(c: &mut Criterion) {
    let config = bench_config();
    let params = PipelineParams::init(&config, 7).unwrap();
    let sample = bench_sample(&config, 7);
    let features = MultiScaleFeatures::new(sample.features.clone()).unwrap();
    c.bench_function("forward_small", |b| {
        b.iter(|| {
            forward_pipeline(
                black_box(&config),
                black_box(&params),
                &sample.camera,
                &sample.depth,
                &features,
            )
            .unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = interpolation, deformable, forward
}
criterion_main!(benches);
