use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use protomail_bench::{model_case, projection_case, random_vectors};
use protomail_core::protonet::{project_prototypes, similarity};

fn bench_similarity(c: &mut Criterion) {
    let v = random_vectors(2, 128, 0);
    c.bench_function("similarity_d128", |b| {
        b.iter(|| similarity(black_box(&v[0]), black_box(&v[1]), 1e-4).unwrap())
    });
}

fn bench_projection(c: &mut Criterion) {
    let (bank, pool) = projection_case(20, 2000, 16);
    c.bench_function("project_20x2000_d16", |b| {
        b.iter_batched(
            || bank.clone(),
            |mut bank| project_prototypes(&mut bank, black_box(&pool)).unwrap(),
            criterion::BatchSize::SmallInput,
        )
    });
}

fn bench_forward(c: &mut Criterion) {
    let (model, prepared) = model_case(16);
    c.bench_function("encode_views_d16", |b| b.iter(|| model.encode_views(black_box(&prepared[0]))));
}

criterion_group!(benches, bench_similarity, bench_projection, bench_forward);
criterion_main!(benches);
