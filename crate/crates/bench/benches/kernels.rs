use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use deconfounder_core::msm::{build_features, fit_logistic, fit_wls, FeatureSet, LogisticConfig};
use deconfounder_core::nn::Lstm;
use deconfounder_core::numerics::linalg::gemm;
use deconfounder_core::{ParamSet, RngStream};

fn lstm_step(c: &mut Criterion) {
    let (batch, input, hidden) = (64, 5, 64);
    let mut rng = RngStream::new(0);
    let mut params = ParamSet::new();
    let cell = Lstm::register(&mut params, "lstm", input, hidden, &mut rng);
    let x: Vec<f64> = (0..batch * input).map(|_| rng.normal(0.0, 1.0)).collect();
    let h = vec![0.1; batch * hidden];
    let state = vec![0.0; batch * hidden];
    c.bench_function("lstm_forward_64x64", |b| {
        b.iter(|| cell.forward(&params, black_box(&x), &h, &state, batch))
    });
    let step = cell.forward(&params, &x, &h, &state, batch);
    let dh = vec![1.0; batch * hidden];
    c.bench_function("lstm_backward_64x64", |b| {
        b.iter_batched(
            || params.zeros_like(),
            |mut grads| cell.backward(&params, &mut grads, black_box(&step), &dh, &state, batch),
            BatchSize::SmallInput,
        )
    });
}

fn matmul(c: &mut Criterion) {
    let n = 128;
    let a = vec![0.5; n * n];
    let bm = vec![0.25; n * n];
    c.bench_function("gemm_128", |b| {
        b.iter_batched(
            || vec![0.0; n * n],
            |mut out| gemm(n, n, n, 1.0, black_box(&a), false, &bm, false, 0.0, &mut out),
            BatchSize::SmallInput,
        )
    });
}

fn regressions(c: &mut Criterion) {
    let ds = deconfounder_bench::synthetic(1000, 3);
    let design = build_features(&ds, FeatureSet::Denominator);
    let y: Vec<f64> = ds.patients.iter().flat_map(|p| p.a.iter().map(|a| f64::from(a[0]))).collect();
    c.bench_function("logistic_fit_1000_patients", |b| {
        b.iter(|| fit_logistic(black_box(&design), &y, &LogisticConfig::default()))
    });
    let outcome = build_features(&ds, FeatureSet::Outcome);
    let target: Vec<f64> = ds.patients.iter().flat_map(|p| p.y.iter().copied()).collect();
    let w = vec![1.0; target.len()];
    c.bench_function("wls_fit_1000_patients", |b| {
        b.iter(|| fit_wls(black_box(&outcome), &target, &w))
    });
}

criterion_group!(benches, lstm_step, matmul, regressions);
criterion_main!(benches);
