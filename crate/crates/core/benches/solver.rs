//! Benchmarks for the data-parallel kernels against their sequential forms.
//!
//! The `matmul` group compares the two kernels inside one build. The solver
//! groups exercise whatever the build's feature set selects; run
//! `cargo bench` (rayon path) and `cargo bench --no-default-features`
//! (sequential path) to compare end to end.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pcdeq_core::activations::ActivationKind;
use pcdeq_core::equilibrium::{EquilibriumLayer, SolverSettings};
use pcdeq_core::numeric::{matmul, matmul_seq, ConvShape, Matrix, Rng};

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    // The linear stem shape: batch 64 of 784 features onto 80 channels.
    let a = random_matrix(&mut rng, 64, 784);
    let b = random_matrix(&mut rng, 784, 80);
    let mut group = c.benchmark_group("matmul_64x784x80");
    group.sample_size(20);
    group.bench_function("parallel", |bench| {
        bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
    });
    group.bench_function("sequential", |bench| {
        bench.iter(|| matmul_seq(black_box(&a), black_box(&b)).unwrap())
    });
    group.finish();
}

fn bench_dense_solver(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let layer =
        EquilibriumLayer::random_dense(80, ActivationKind::Sigmoid, SolverSettings::default(), &mut rng)
            .unwrap();
    let x = Matrix::from_vec(64, 80, (0..64 * 80).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
    let (z, _) = layer.forward_solve(&x).unwrap();
    let g = Matrix::from_vec(64, 80, (0..64 * 80).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
    let mut group = c.benchmark_group("dense80_batch64");
    group.sample_size(20);
    group.bench_function("forward_solve", |bench| {
        bench.iter(|| layer.forward_solve(black_box(&x)).unwrap())
    });
    group.bench_function("backward_solve", |bench| {
        bench.iter(|| layer.backward_solve(black_box(&z), black_box(&x), black_box(&g)).unwrap())
    });
    group.finish();
}

fn bench_conv_solver(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let shape = ConvShape { channels: 8, height: 14, width: 14, kernel: 3, stride: 1, padding: 1 };
    let layer =
        EquilibriumLayer::random_conv(shape, ActivationKind::Sigmoid, SolverSettings::default(), &mut rng)
            .unwrap();
    let n = shape.input_len();
    let x = Matrix::from_vec(16, n, (0..16 * n).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
    let mut group = c.benchmark_group("conv8x14x14_batch16");
    group.sample_size(10);
    group.bench_function("forward_solve", |bench| {
        bench.iter(|| layer.forward_solve(black_box(&x)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_dense_solver, bench_conv_solver);
criterion_main!(benches);
