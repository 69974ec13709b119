use adbench_tensor::exec;
use adbench_tensor::{Tape, Tensor};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn input(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5)
}

fn paths() -> [(&'static str, bool); 2] {
    [("sequential", true), ("parallel", false)]
}

fn conv_forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_fwd_bwd");
    let x = input(&[8, 16, 32, 32]);
    let w = input(&[32, 16, 3, 3]);
    for (label, strict) in paths() {
        exec::set_strict(Some(strict));
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let xv = tape.leaf(x.clone());
                let wv = tape.leaf(w.clone());
                let y = tape.conv2d(&xv, &wv, 1, 1).unwrap();
                let loss = tape.sum(&y);
                black_box(tape.backward(&loss).unwrap());
            })
        });
    }
    exec::set_strict(None);
    group.finish();
}

fn batch_norm_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_norm_fwd_bwd");
    let x = input(&[16, 32, 32, 32]);
    let gamma = Tensor::full(&[32], 1.0f32);
    let beta = Tensor::zeros(&[32]);
    for (label, strict) in paths() {
        exec::set_strict(Some(strict));
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let xv = tape.leaf(x.clone());
                let (g, bt) = (tape.leaf(gamma.clone()), tape.leaf(beta.clone()));
                let (y, _) = tape.batch_norm(&xv, &g, &bt, adbench_tensor::BatchNormMode::Train, 1e-5).unwrap();
                let loss = tape.sum(&y);
                black_box(tape.backward(&loss).unwrap());
            })
        });
    }
    exec::set_strict(None);
    group.finish();
}

fn max_pool(c: &mut Criterion) {
    let mut group = c.benchmark_group("max_pool_3s2");
    let x = input(&[8, 32, 64, 64]);
    for (label, strict) in paths() {
        exec::set_strict(Some(strict));
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| {
                let tape = Tape::inference();
                black_box(tape.max_pool2d(&tape.constant(x.clone()), 3, 2, 1).unwrap());
            })
        });
    }
    exec::set_strict(None);
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv_forward_backward, batch_norm_forward, max_pool
}
criterion_main!(benches);
