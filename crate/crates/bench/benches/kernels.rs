use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use drbnet_core::drb::{dynamic_filter, KernelVolume};
use drbnet_core::model::{Model, ModelConfig};
use drbnet_core::tensor::{ops, GradTape, Tensor};

fn bench_conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    let tape = GradTape::disabled();
    for &(ch, size) in &[(16usize, 64usize), (32, 32), (64, 16)] {
        let mut rng = drbnet_core::rng(1);
        let x = Tensor::rand_uniform(&[1, ch, size, size], -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform(&[ch, ch, 3, 3], -0.2, 0.2, &mut rng);
        let b = Tensor::zeros(&[ch]);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{ch}ch_{size}px")),
            &(),
            |bench, _| bench.iter(|| ops::conv2d(&tape, &x, &w, &b, 1, 1).unwrap()),
        );
    }
    group.finish();
}

fn bench_conv2d_backward(c: &mut Criterion) {
    let mut rng = drbnet_core::rng(2);
    let x = Tensor::rand_uniform(&[1, 16, 64, 64], -1.0, 1.0, &mut rng).requires_grad();
    let w = Tensor::rand_uniform(&[16, 16, 3, 3], -0.2, 0.2, &mut rng).requires_grad();
    let b = Tensor::zeros(&[16]).requires_grad();
    c.bench_function("conv2d_fwd_bwd_16ch_64px", |bench| {
        bench.iter(|| {
            let tape = GradTape::new();
            let y = ops::conv2d(&tape, &x, &w, &b, 1, 1).unwrap();
            let loss = ops::mean(&tape, &y).unwrap();
            tape.backward(&loss).unwrap();
            x.zero_grad();
            w.zero_grad();
            b.zero_grad();
        })
    });
}

fn bench_dynamic_filter(c: &mut Criterion) {
    let mut group = c.benchmark_group("dynamic_filter");
    let tape = GradTape::disabled();
    for &k in &[5usize, 7, 9] {
        let mut rng = drbnet_core::rng(3);
        let x = Tensor::rand_uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rng);
        let kv =
            KernelVolume::new(Tensor::rand_uniform(&[1, k * k, 64, 64], -0.2, 0.2, &mut rng), k)
                .unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(format!("k{k}")), &(), |bench, _| {
            bench.iter(|| dynamic_filter(&tape, &x, &kv).unwrap())
        });
    }
    group.finish();
}

fn bench_bilinear(c: &mut Criterion) {
    let tape = GradTape::disabled();
    let mut rng = drbnet_core::rng(4);
    let x = Tensor::rand_uniform(&[1, 16, 32, 32], 0.0, 1.0, &mut rng);
    c.bench_function("bilinear_resize_2x_16ch", |bench| {
        bench.iter(|| ops::bilinear_resize(&tape, &x, 64, 64).unwrap())
    });
}

fn bench_model_forward(c: &mut Criterion) {
    let model = Model::new(ModelConfig::default()).unwrap();
    let mut rng = drbnet_core::rng(5);
    let x = Tensor::rand_uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rng);
    let tape = GradTape::disabled();
    c.bench_function("model_forward_w16_64px", |bench| {
        bench.iter(|| model.forward(&tape, &x).unwrap())
    });
}

criterion_group!(
    benches,
    bench_conv2d,
    bench_conv2d_backward,
    bench_dynamic_filter,
    bench_bilinear,
    bench_model_forward
);
criterion_main!(benches);
