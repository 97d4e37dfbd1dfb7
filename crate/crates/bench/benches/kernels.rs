use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use yunlu_core::numerics::kernels::gemm_acc;
use yunlu_core::{Graph, Rng};

fn gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    let mut rng = Rng::new(0);
    for n in [32usize, 64, 128, 256] {
        let a = rng.normal_tensor(vec![n, n], 1.0);
        let b = rng.normal_tensor(vec![n, n], 1.0);
        let mut out = vec![0.0; n * n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| {
                out.fill(0.0);
                gemm_acc(&mut out, a.data(), b.data(), n, n, n);
                black_box(&out);
            })
        });
    }
    group.finish();
}

fn matmul_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_fwd_bwd");
    let mut rng = Rng::new(1);
    for n in [32usize, 128] {
        let a = rng.normal_tensor(vec![n, n], 1.0);
        let b = rng.normal_tensor(vec![n, n], 1.0);
        let w = rng.normal_tensor(vec![n, n], 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.leaf(a.clone().with_grad());
                let y = g.leaf(b.clone().with_grad());
                let z = g.matmul(x, y).unwrap();
                let l = g.weighted_sum(z, &w).unwrap();
                black_box(g.backward(l).unwrap());
            })
        });
    }
    group.finish();
}

fn conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_fwd_bwd");
    group.sample_size(20);
    let mut rng = Rng::new(2);
    // Latent-shaped input through the first stride-2 layer.
    for (batch, side) in [(8usize, 32usize), (8, 64)] {
        let x = rng.normal_tensor(vec![batch, 4, side, side], 1.0);
        let k = rng.normal_tensor(vec![16, 4, 4, 4], 0.1);
        let w = rng.normal_tensor(vec![batch, 16, side / 2, side / 2], 1.0);
        group.bench_function(format!("{batch}x4x{side}x{side}"), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let kv = g.leaf(k.clone().with_grad());
                let y = g.conv2d(xv, kv, None, 2, 1).unwrap();
                let l = g.weighted_sum(y, &w).unwrap();
                black_box(g.backward(l).unwrap());
            })
        });
    }
    group.finish();
}

criterion_group!(benches, gemm, matmul_backward, conv2d);
criterion_main!(benches);
