use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hazemoe_bench::{nighthaze_pairs, scenes, weights};
use hazemoe_core::autograd::{Conv2dSpec, Graph};
use hazemoe_core::freq_ops::{dwt_haar, fft2, ifft2};
use hazemoe_core::network::{init_model, ForwardOptions, ModelConfig};
use hazemoe_core::training::{TrainConfig, Trainer};
use hazemoe_core::Tensor;

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3");
    for ch in [16, 32, 64] {
        let x = widen(&scenes(1, 64), ch);
        let w = weights(&[ch, ch, 3, 3]);
        group.bench_with_input(BenchmarkId::from_parameter(ch), &ch, |b, _| {
            b.iter(|| {
                let g = Graph::new();
                let y = g
                    .constant(x.clone())
                    .conv2d(g.constant(w.clone()), None, Conv2dSpec::same(3, 1))
                    .unwrap();
                black_box(y.value());
            })
        });
    }
    group.finish();
}

fn spectral(c: &mut Criterion) {
    let x = scenes(4, 64);
    c.bench_function("fft2_ifft2_4x3x64x64", |b| {
        b.iter(|| ifft2(&fft2(black_box(&x)).unwrap()).unwrap())
    });
    c.bench_function("dwt_haar_4x3x64x64", |b| b.iter(|| dwt_haar(black_box(&x)).unwrap()));
}

fn network(c: &mut Criterion) {
    let m = init_model(&ModelConfig::default(), 0).unwrap();
    let net = m.network().unwrap();
    let x = scenes(1, 64);
    c.bench_function("forward_default_1x3x64x64", |b| {
        b.iter(|| net.run(&m.params, black_box(&x), ForwardOptions::default()).unwrap())
    });

    let set = nighthaze_pairs(4, 64);
    let mut trainer = Trainer::new(&ModelConfig::default(), TrainConfig::default()).unwrap();
    let batch = trainer.batch_for_step(std::slice::from_ref(&set), 0).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("step_default_4x3x64x64", |b| {
        b.iter(|| trainer.train_step(&batch, 1_000).unwrap())
    });
    group.finish();
}

/// Repeats the scene channels up to `ch`.
fn widen(x: &Tensor<f32>, ch: usize) -> Tensor<f32> {
    let (_, c, h, w) = x.dims4().unwrap();
    let d = x.data();
    Tensor::from_fn(&[1, ch, h, w], |i| d[((i / (h * w)) % c) * h * w + i % (h * w)])
}

criterion_group!(benches, conv, spectral, network);
criterion_main!(benches);
