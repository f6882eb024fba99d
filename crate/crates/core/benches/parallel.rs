//! Parallel-vs-sequential benchmarks for the data-parallel inner loops.
//!
//! Each workload runs twice: on the default rayon pool and inside a
//! single-thread pool, which exercises the same code path the sequential
//! (`--no-default-features`) build takes. Results are bitwise identical
//! across the two; only the wall time differs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use reasoner_core::autograd::{Padding, Tape};
use reasoner_core::model::{BindMode, Model, ModelConfig};
use reasoner_core::tensor::Tensor;
use reasoner_core::worldgen::{gen_cater_episode, CaterConfig};

fn in_pool<F: Fn() + Send + Sync>(threads: Option<usize>, f: F) {
    match threads {
        #[cfg(feature = "parallel")]
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
            pool.install(f);
        }
        _ => f(),
    }
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_512x128x128");
    group.sample_size(20);
    let a = Tensor::<f32>::full(&[512, 128], 0.5);
    let b = Tensor::<f32>::full(&[128, 128], 0.25);
    for (label, threads) in [("parallel", None), ("sequential", Some(1))] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &threads, |bench, &threads| {
            bench.iter(|| {
                in_pool(threads, || {
                    let mut tape = Tape::new();
                    let ai = tape.constant(a.clone());
                    let bi = tape.constant(b.clone());
                    std::hint::black_box(tape.matmul(ai, bi).unwrap());
                })
            })
        });
    }
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_64x32ch_8x8");
    group.sample_size(20);
    let x = Tensor::<f32>::full(&[64, 32, 8, 8], 0.5);
    let w = Tensor::<f32>::full(&[64, 32, 3, 3], 0.1);
    for (label, threads) in [("parallel", None), ("sequential", Some(1))] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &threads, |bench, &threads| {
            bench.iter(|| {
                in_pool(threads, || {
                    let mut tape = Tape::new();
                    let xi = tape.constant(x.clone());
                    let wi = tape.constant(w.clone());
                    std::hint::black_box(tape.conv2d(xi, wi, 1, Padding::Same).unwrap());
                })
            })
        });
    }
    group.finish();
}

fn bench_encode(c: &mut Criterion) {
    let mut group = c.benchmark_group("encode_16_frames");
    group.sample_size(10);
    let config = ModelConfig {
        stem_channels: [16, 32, 64],
        dim: 64,
        enc_depth: 2,
        dec_depth: 2,
        ..ModelConfig::default()
    };
    let model = Model::<f32>::init(config, 110, 0).unwrap();
    let frames = Tensor::<f32>::full(&[16, 3, 32, 32], 0.4);
    for (label, threads) in [("parallel", None), ("sequential", Some(1))] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &threads, |bench, &threads| {
            bench.iter(|| {
                in_pool(threads, || {
                    let mut tape = Tape::new();
                    let bound = model.bind(&mut tape, BindMode::Frozen);
                    std::hint::black_box(
                        model.encode_frames(&mut tape, &bound, frames.clone()).unwrap(),
                    );
                })
            })
        });
    }
    group.finish();
}

fn bench_episode_gen(c: &mut Criterion) {
    let mut group = c.benchmark_group("gen_8_tracking_episodes");
    group.sample_size(10);
    let config = CaterConfig::default();
    for (label, threads) in [("parallel", None), ("sequential", Some(1))] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &threads, |bench, &threads| {
            bench.iter(|| {
                in_pool(threads, || {
                    let eps = reasoner_core::par::map_collect(8, |i| {
                        gen_cater_episode(i as u64, &config).unwrap()
                    });
                    std::hint::black_box(eps);
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_conv, bench_encode, bench_episode_gen);
criterion_main!(benches);
