//! Per-sample latency of `predict_proba` on random inputs.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};

pub const LATENCY_BUDGET_MS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputStats {
    pub n: usize,
    pub dim: usize,
    pub mean_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    pub budget_ms: f64,
    pub within_budget: bool,
    /// Sum of all predicted probabilities; identical across runs with one seed.
    pub proba_checksum: f64,
}

/// Time `n` single-row predictions on standard normal vectors drawn from `seed`.
pub fn throughput_bench(model: &ClassifierModel, n: usize, seed: u64) -> Result<ThroughputStats> {
    if n == 0 {
        return Err(Error::EmptyStats);
    }
    let dim = model.weights.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = vec![0f32; dim];
    let mut times = Vec::with_capacity(n);
    let mut checksum = 0.0;
    for _ in 0..n {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let start = Instant::now();
        let p = std::hint::black_box(model.predict_proba(std::hint::black_box(&z))?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
        checksum += p;
    }
    let mean_ms = times.iter().sum::<f64>() / n as f64;
    times.sort_by(f64::total_cmp);
    let p99_ms = times[((0.99 * n as f64).ceil() as usize).clamp(1, n) - 1];
    Ok(ThroughputStats {
        n,
        dim,
        mean_ms,
        p99_ms,
        max_ms: times[n - 1],
        budget_ms: LATENCY_BUDGET_MS,
        within_budget: mean_ms < LATENCY_BUDGET_MS,
        proba_checksum: checksum,
    })
}
