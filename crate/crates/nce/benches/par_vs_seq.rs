//! Convolution and training-step throughput. Build once with the default
//! `parallel` feature and once with `--no-default-features` to compare the
//! rayon lanes against the sequential fallback:
//!
//!   cargo bench --bench par_vs_seq
//!   cargo bench --bench par_vs_seq --no-default-features

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nce::arch::{ArchBody, ArchDesc, BlockDesc, ResnetBody, StageDesc};
use nce::supernet::{stack_images, QuantSetting, SuperNet};
use nce::tape::{BnMode, Tape};
use nce::tensor::Tensor;

fn lane() -> &'static str {
    if cfg!(feature = "parallel") {
        "parallel"
    } else {
        "sequential"
    }
}

fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn bench_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_forward_backward");
    for &(ch, size) in &[(8usize, 16usize), (16, 16), (32, 8)] {
        let input = random_tensor(vec![4, ch, size, size], 1);
        let weight = random_tensor(vec![ch, ch, 3, 3], 2);
        group.bench_with_input(
            BenchmarkId::new(lane(), format!("c{ch}_s{size}")),
            &(input, weight),
            |b, (input, weight)| {
                b.iter(|| {
                    let mut tape = Tape::new();
                    let x = tape.leaf(input.clone());
                    let w = tape.leaf(weight.clone());
                    let y = tape.conv2d(x, w, 1, 1).unwrap();
                    let coeffs = vec![1.0f32; tape.value(y).numel()];
                    let loss = tape.dot_reduce(y, &coeffs);
                    tape.backward(loss).unwrap();
                    tape.grad(x)[0]
                })
            },
        );
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let desc = ArchDesc {
        name: "bench".into(),
        input_channels: 3,
        input_size: 16,
        num_classes: 10,
        body: ArchBody::Resnet(ResnetBody {
            stem: 8,
            stages: vec![
                StageDesc { width: 8, stride: 1, blocks: vec![BlockDesc { mid: 8 }] },
                StageDesc { width: 16, stride: 2, blocks: vec![BlockDesc { mid: 16 }] },
            ],
        }),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = SuperNet::fixed(&desc, QuantSetting::full_precision(), &mut rng).unwrap();
    let images: Vec<Tensor> = (0..8).map(|i| random_tensor(vec![3, 16, 16], 10 + i)).collect();
    let batch = stack_images(&images);
    let labels: Vec<usize> = (0..8).map(|i| i % 10).collect();
    let sample = net.argmax_sample();

    c.bench_function(&format!("train_step/{}", lane()), |b| {
        b.iter(|| {
            net.params.zero_grads();
            let mut tape = Tape::new();
            let (logits, bindings) = net
                .forward(&mut tape, &batch, &sample, BnMode::Train, false, None)
                .unwrap();
            let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
            tape.backward(loss).unwrap();
            nce::optim::apply_bindings(&tape, &mut net.params, &bindings);
            tape.value(loss).data[0]
        })
    });
}

criterion_group!(benches, bench_conv, bench_train_step);
criterion_main!(benches);
