//! Parallel vs single-threaded wall time for the row-parallel kernels.
//!
//! With the `parallel` feature each kernel runs twice: inside a 1-thread
//! rayon pool and on the global pool. Without it only the sequential build
//! is measured.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tardis_core::classifier::{train, TrainConfig, TrainedOn};
use tardis_core::clustering::{kmeans_fit, ClusterConfig};
use tardis_core::data::{DatasetManifest, FeatureMatrix, Role, SampleRecord};
use tardis_core::pooling::{pool_batch, PoolingMethod};

fn matrix(n: usize, d: usize, seed: u64) -> FeatureMatrix {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    FeatureMatrix::new(n, d, (0..n * d).map(|_| r.sample::<f32, _>(StandardNormal)).collect()).unwrap()
}

#[cfg(feature = "parallel")]
fn modes() -> Vec<(&'static str, Option<rayon::ThreadPool>)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    vec![("1-thread", Some(one)), ("global-pool", None)]
}

#[cfg(not(feature = "parallel"))]
fn modes() -> Vec<(&'static str, Option<()>)> {
    vec![("sequential", None)]
}

#[cfg(feature = "parallel")]
fn within<R: Send>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> R + Send) -> R {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn within<R>(_: &Option<()>, f: impl FnOnce() -> R) -> R {
    f()
}

fn bench_kmeans(c: &mut Criterion) {
    let x = matrix(4000, 32, 1);
    let cfg = ClusterConfig {
        n_init: 1,
        max_iter: 20,
        ..ClusterConfig::new(64, 0.1, 0)
    };
    let mut g = c.benchmark_group("kmeans_fit");
    g.sample_size(10);
    for (name, pool) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| within(&pool, || kmeans_fit(&x, &cfg).unwrap()))
        });
    }
    g.finish();
}

fn bench_predict(c: &mut Criterion) {
    let x = matrix(20_000, 256, 2);
    let labels: Vec<u8> = (0..x.n_rows()).map(|i| (i % 2) as u8).collect();
    let small = x.select_rows(&(0..500).collect::<Vec<_>>());
    let cfg = TrainConfig {
        max_iter: 20,
        ..TrainConfig::default()
    };
    let (model, _) = train(&small, &labels[..500], &cfg, TrainedOn::Surrogate).unwrap();
    let mut g = c.benchmark_group("predict_batch");
    for (name, pool) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| within(&pool, || model.predict_batch(&x).unwrap()))
        });
    }
    g.finish();
}

fn bench_pool(c: &mut Criterion) {
    let shape = (64, 14, 14);
    let n = 512;
    let raw = matrix(n, shape.0 * shape.1 * shape.2, 3);
    let samples = (0..n).map(|i| SampleRecord::new(format!("s{i}"), Role::Wild, i)).collect();
    let manifest = DatasetManifest::for_tensors(samples, shape);
    let mut g = c.benchmark_group("pool_batch");
    g.sample_size(20);
    for (name, pool) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| within(&pool, || pool_batch(&manifest, &raw, &PoolingMethod::MeanStd).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_kmeans, bench_predict, bench_pool);
criterion_main!(benches);
