//! Rayon fan-out against the sequential path on the same workloads.
//! `cargo bench --bench parallel`; set DEPTHSSL_WORKERS to pin the pool size.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use depthssl::depth_io::DepthImage;
use depthssl::evaluation::embed_images;
use depthssl::harness::{toy_distill, toy_pretrain};
use depthssl::model::init_model;
use depthssl::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn images(n: usize, size: usize) -> Vec<DepthImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..n)
        .map(|_| DepthImage::from_raw(size, size, (0..size * size).map(|_| rng.random_range(0.5f32..6.0)).collect()).unwrap())
        .collect()
}

fn embed(c: &mut Criterion) {
    par::init_workers(None);
    let vit = toy_pretrain().model;
    let mut cnn = vit.clone();
    cnn.backbone = toy_distill().students[0].backbone.clone();
    let data = images(32, 56);
    let mut group = c.benchmark_group("embed_32_images");
    group.sample_size(10);
    for (name, model, size) in [("vit", &vit, 32), ("cnn", &cnn, 64)] {
        let params = init_model(model, 1);
        for (mode, on) in [("parallel", true), ("sequential", false)] {
            group.bench_function(BenchmarkId::new(name, mode), |b| {
                par::set_enabled(on);
                b.iter(|| black_box(embed_images(&params, &model.backbone, &data, size, None, 4).unwrap()));
            });
        }
    }
    par::set_enabled(true);
    group.finish();
}

criterion_group!(benches, embed);
criterion_main!(benches);
