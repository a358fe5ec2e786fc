//! Microbenchmarks for the numeric hot paths: the matmul kernel, one full
//! loss-plus-gradient evaluation, a single dual-number forward sweep, and
//! few-step sampling.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use facm_bench::{bench_batch, bench_config, bench_network, bench_spec};
use facm_core::objectives::{facm_loss, facm_targets, VelocitySource};
use facm_core::sampler::few_step_sample;
use facm_core::tensor::Tensor;
use facm_core::rng;
use rand::RngExt;
use rand_distr::StandardNormal;

fn random_matrix(n: usize, m: usize, label: &str) -> Tensor {
    let mut r = rng::stream(3, label);
    Tensor::new(vec![n, m], (0..n * m).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
}

fn matmul(c: &mut Criterion) {
    let a = random_matrix(64, 64, "bench.a");
    let b = random_matrix(64, 64, "bench.b");
    c.bench_function("matmul_64x64x64", |bench| {
        bench.iter(|| black_box(black_box(&a).matmul(black_box(&b))))
    });
}

fn loss_step(c: &mut Criterion) {
    let cfg = bench_config();
    let net = bench_network(&cfg);
    let batch = bench_batch(&cfg, 64);
    let spec = bench_spec(&cfg);
    c.bench_function("facm_loss_and_grads_b64_w64", |bench| {
        bench.iter(|| black_box(facm_loss(&net, &VelocitySource::Data, black_box(&batch), &spec)))
    });
}

fn jvp_sweep(c: &mut Criterion) {
    let cfg = bench_config();
    let net = bench_network(&cfg);
    let batch = bench_batch(&cfg, 64);
    let spec = bench_spec(&cfg);
    c.bench_function("dual_forward_sweep_b64_w64", |bench| {
        bench.iter(|| black_box(facm_targets(&net, &VelocitySource::Data, black_box(&batch), &spec)))
    });
}

fn sampling(c: &mut Criterion) {
    let cfg = bench_config();
    let net = bench_network(&cfg);
    c.bench_function("few_step_sample_nfe2_n256", |bench| {
        bench.iter(|| black_box(few_step_sample(&net, 2, 256, None, 11)))
    });
}

criterion_group!(benches, matmul, loss_step, jvp_sweep, sampling);
criterion_main!(benches);
