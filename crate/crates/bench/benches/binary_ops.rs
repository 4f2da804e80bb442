use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use hybnn_bench::{classifier, random_codes};
use hybnn_core::bnn::bnn_predict;
use hybnn_core::xnor::compile;
use hybnn_core::{binary_dot, unpack};

fn dot(c: &mut Criterion) {
    let mut group = c.benchmark_group("dot");
    for bits in [200usize, 1024, 8192] {
        let v = random_codes(2, bits, 1);
        let (da, db) = (unpack(&v[0]), unpack(&v[1]));
        group.throughput(Throughput::Elements(bits as u64));
        group.bench_with_input(BenchmarkId::new("popcount", bits), &bits, |b, _| {
            b.iter(|| binary_dot(black_box(&v[0]), black_box(&v[1])).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("dense_f32", bits), &bits, |b, _| {
            b.iter(|| {
                black_box(&da)
                    .iter()
                    .zip(black_box(&db))
                    .map(|(x, y)| x * y)
                    .sum::<f32>()
            })
        });
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let model = classifier(3);
    let packed = compile(&model).unwrap();
    let codes = random_codes(1024, 200, 2);
    let mut group = c.benchmark_group("classifier_1024_codes");
    group.throughput(Throughput::Elements(codes.len() as u64));
    group.bench_function("packed", |b| b.iter(|| packed.infer_batch(black_box(&codes)).unwrap()));
    group.bench_function("dense_eval", |b| b.iter(|| bnn_predict(&model, black_box(&codes)).unwrap()));
    group.finish();
}

criterion_group!(benches, dot, inference);
criterion_main!(benches);
