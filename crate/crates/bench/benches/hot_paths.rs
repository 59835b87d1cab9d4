use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use graftkit_core::{
    ap50, gram, lenet5, split, voxelize, BBox, Detection, EventRecord, GroundTruth, Polarity, SplitSpec, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_events(n: usize, side: u32, rng: &mut ChaCha8Rng) -> Vec<EventRecord> {
    let mut t = 0;
    (0..n)
        .map(|_| {
            t += rng.random_range(0..20);
            let p = if rng.random::<bool>() { Polarity::On } else { Polarity::Off };
            EventRecord::new(t, rng.random_range(0..side), rng.random_range(0..side), p)
        })
        .collect()
}

fn bench_voxelize(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("voxelize");
    for n in [1_000, 100_000] {
        let events = random_events(n, 128, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &events, |b, ev| {
            b.iter(|| voxelize(black_box(ev), 10, 128, 128).unwrap())
        });
    }
    group.finish();
}

fn bench_front_forward(c: &mut Criterion) {
    let net = lenet5(1, 0);
    let front = split(&net, SplitSpec::new(2, 3)).unwrap().front;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_shape_fn((32, 1, 28, 28), |_| rng.random::<f64>());
    c.bench_function("lenet_front_forward_b32", |b| b.iter(|| front.forward(black_box(&x)).unwrap()));
    c.bench_function("lenet_forward_train_backward_b32", |b| {
        b.iter(|| {
            let (y, tape) = net.forward_train(black_box(&x)).unwrap();
            net.backward(&tape, &y).unwrap()
        })
    });
}

fn bench_gram(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = Tensor::from_shape_fn((32, 16, 5, 5), |_| rng.random::<f64>());
    c.bench_function("gram_32x16x5x5", |b| b.iter(|| gram(black_box(&f)).unwrap()));
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.random_range(0.0..90.0);
    let y = rng.random_range(0.0..90.0);
    BBox::new(x, y, x + rng.random_range(2.0..10.0), y + rng.random_range(2.0..10.0))
}

fn bench_ap50(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gts: Vec<GroundTruth> = (0..2_000)
        .map(|i| GroundTruth {
            image_id: i / 10,
            class_id: (i % 3) as u32,
            bbox: random_box(&mut rng),
        })
        .collect();
    let dets: Vec<Detection> = (0..10_000)
        .map(|i| Detection {
            image_id: i / 50,
            class_id: (i % 3) as u32,
            bbox: random_box(&mut rng),
            confidence: rng.random(),
        })
        .collect();
    c.bench_function("ap50_10k_dets", |b| b.iter(|| ap50(black_box(&dets), black_box(&gts)).unwrap()));
}

criterion_group!(benches, bench_voxelize, bench_front_forward, bench_gram, bench_ap50);
criterion_main!(benches);
