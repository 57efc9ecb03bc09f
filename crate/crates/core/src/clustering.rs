//! k-means over the joint ID+WILD feature space and cluster-level surrogate
//! ID/OOD labelling.
//!
//! A cluster is labelled ID when the fraction of its rows that came from the
//! known-ID set is at least the threshold `t`; otherwise every row in it is
//! labelled OOD. The pair `(k, t)` is chosen by minimizing
//! `H(S) + P(mis-ID) - P(corr-ID)`, where `H(S)` is the average binary entropy
//! of the per-cluster {ID, WILD} composition.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMatrix, Origin};
use crate::error::{Error, Result};
use crate::par;

pub const DEFAULT_THRESHOLD: f64 = 0.1;
pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_TRIALS: usize = 20;
pub const DEFAULT_N_INIT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k: usize,
    /// Minimum ID fraction for a cluster to be labelled ID.
    pub t: f64,
    pub seed: u64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Stop when the largest centroid shift, relative to the data's RMS
    /// spread, falls below this.
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest final inertia wins.
    #[serde(default = "default_n_init")]
    pub n_init: usize,
}

fn default_n_init() -> usize {
    DEFAULT_N_INIT
}

fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

impl ClusterConfig {
    pub fn new(k: usize, t: f64, seed: u64) -> Self {
        ClusterConfig {
            k,
            t,
            seed,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            n_init: DEFAULT_N_INIT,
        }
    }

    pub fn validate(&self, n_rows: usize) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if !(self.t > 0.0 && self.t < 1.0) {
            return Err(Error::Config(format!("t must lie in (0, 1), got {}", self.t)));
        }
        if self.max_iter == 0 || self.n_init == 0 || !(self.tol >= 0.0) {
            return Err(Error::Config(
                "max_iter and n_init must be positive and tol non-negative".into(),
            ));
        }
        if self.k > n_rows {
            return Err(Error::TooFewSamples {
                needed: self.k,
                available: n_rows,
            });
        }
        Ok(())
    }
}

/// `k = ceil(0.3 * m)`, `t = 0.1`, seed 0.
pub fn default_config(m: usize) -> Result<ClusterConfig> {
    if m < 7 {
        return Err(Error::TooFewSamples {
            needed: 7,
            available: m,
        });
    }
    Ok(ClusterConfig::new(default_k(m), DEFAULT_THRESHOLD, 0))
}

/// `ceil(0.3 * m)` in exact integer arithmetic.
pub fn default_k(m: usize) -> usize {
    (3 * m).div_ceil(10)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ClusterLabel {
    Id,
    Ood,
}

impl ClusterLabel {
    pub fn as_u8(self) -> u8 {
        match self {
            ClusterLabel::Id => 0,
            ClusterLabel::Ood => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub cluster_sizes: Vec<usize>,
    /// Empty until [`label_clusters`] has run.
    #[serde(default)]
    pub id_fraction: Vec<f64>,
    #[serde(default)]
    pub surrogate_label: Vec<ClusterLabel>,
    pub inertia: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    pub fn is_labeled(&self) -> bool {
        !self.surrogate_label.is_empty() && self.surrogate_label.len() == self.k()
    }

    /// Index of the nearest centroid (squared Euclidean, ties to the lowest index).
    pub fn nearest(&self, z: &[f32]) -> (usize, f64) {
        nearest_centroid(&self.centroids, z)
    }

    /// Surrogate label of each row's nearest cluster.
    pub fn predict_labels(&self, x: &FeatureMatrix) -> Result<Vec<u8>> {
        if !self.is_labeled() {
            return Err(Error::UnfittedModel);
        }
        self.check_dim(x.n_cols())?;
        Ok(par::map_range(x.n_rows(), |i| {
            self.surrogate_label[self.nearest(x.row(i)).0].as_u8()
        }))
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found,
            });
        }
        Ok(())
    }
}

fn sq_dist(a: &[f32], c: &[f64]) -> f64 {
    a.iter()
        .zip(c)
        .map(|(&x, &y)| {
            let d = x as f64 - y;
            d * d
        })
        .sum()
}

fn nearest_centroid(centroids: &[Vec<f64>], z: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(z, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    /// Centroids, sizes and inertia; labels are filled by [`label_clusters`].
    pub model: ClusterModel,
    pub assignments: Vec<usize>,
    /// Inertia after every assignment step, starting with the initial one.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn kmeans_pp_init(x: &FeatureMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = x.n_rows();
    let to_f64 = |i: usize| x.row(i).iter().map(|&v| v as f64).collect::<Vec<_>>();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(to_f64(rng.random_range(0..n)));
    let mut d2: Vec<f64> = par::map_range(n, |i| sq_dist(x.row(i), &centroids[0]));
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            // rounding can walk past the end; fall back to the last positive weight
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = to_f64(pick);
        let fresh: Vec<f64> = par::map_range(n, |i| sq_dist(x.row(i), &c));
        for (d, f) in d2.iter_mut().zip(fresh) {
            if f < *d {
                *d = f;
            }
        }
        centroids.push(c);
    }
    centroids
}

fn assign_step(x: &FeatureMatrix, centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    let pairs = par::map_range(x.n_rows(), |i| nearest_centroid(centroids, x.row(i)));
    pairs.into_iter().unzip()
}

/// Recompute means in row order. Empty clusters move onto the point farthest
/// from its current centroid (each such point is used at most once).
fn update_step(x: &FeatureMatrix, assignments: &[usize], dist: &[f64], k: usize) -> Vec<Vec<f64>> {
    let f = x.n_cols();
    let mut sums = vec![vec![0.0f64; f]; k];
    let mut counts = vec![0usize; k];
    for (i, &c) in assignments.iter().enumerate() {
        counts[c] += 1;
        for (s, &v) in sums[c].iter_mut().zip(x.row(i)) {
            *s += v as f64;
        }
    }
    let mut taken = vec![false; x.n_rows()];
    for c in 0..k {
        if counts[c] > 0 {
            let n = counts[c] as f64;
            sums[c].iter_mut().for_each(|s| *s /= n);
            continue;
        }
        let far = (0..x.n_rows())
            .filter(|&i| !taken[i])
            .fold(None::<usize>, |best, i| match best {
                Some(b) if dist[b] >= dist[i] => Some(b),
                _ => Some(i),
            });
        if let Some(i) = far {
            taken[i] = true;
            sums[c] = x.row(i).iter().map(|&v| v as f64).collect();
        }
    }
    sums
}

fn rms_spread(x: &FeatureMatrix) -> f64 {
    let n = x.n_rows() as f64;
    let f = x.n_cols();
    let mut mean = vec![0.0f64; f];
    for r in x.rows() {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let var: f64 = x
        .rows()
        .map(|r| sq_dist(r, &mean))
        .sum::<f64>()
        / (n * f.max(1) as f64);
    if var > 0.0 {
        var.sqrt()
    } else {
        1.0
    }
}

/// Lloyd's algorithm from `n_init` seeded k-means++ starts; keeps the run
/// with the lowest final inertia (earliest on ties).
pub fn kmeans_fit(x: &FeatureMatrix, cfg: &ClusterConfig) -> Result<KMeansFit> {
    if x.n_rows() < cfg.k {
        return Err(Error::TooFewSamples {
            needed: cfg.k,
            available: x.n_rows(),
        });
    }
    if cfg.k == 0 || x.n_rows() == 0 {
        return Err(Error::TooFewSamples {
            needed: cfg.k.max(1),
            available: x.n_rows(),
        });
    }
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds: Vec<u64> = (0..cfg.n_init.max(1)).map(|_| master.random()).collect();
    let spread = rms_spread(x);
    let runs = par::map_slice(&seeds, |&s| lloyd(x, cfg, s, spread));
    Ok(runs
        .into_iter()
        .reduce(|best, r| if r.model.inertia < best.model.inertia { r } else { best })
        .expect("n_init >= 1"))
}

fn lloyd(x: &FeatureMatrix, cfg: &ClusterConfig, seed: u64, spread: f64) -> KMeansFit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(x, cfg.k, &mut rng);

    let (mut assignments, mut dist) = assign_step(x, &centroids);
    let mut history = vec![dist.iter().sum::<f64>()];
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let updated = update_step(x, &assignments, &dist, cfg.k);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0f64, f64::max)
            / spread;
        centroids = updated;
        let (next, next_dist) = assign_step(x, &centroids);
        let inertia: f64 = next_dist.iter().sum();
        debug_assert!(
            inertia <= history[history.len() - 1] * (1.0 + 1e-12) + 1e-12,
            "inertia increased"
        );
        history.push(inertia);
        iterations += 1;
        let unchanged = next == assignments;
        assignments = next;
        dist = next_dist;
        if unchanged || shift < cfg.tol {
            break;
        }
    }

    let mut sizes = vec![0usize; cfg.k];
    for &a in &assignments {
        sizes[a] += 1;
    }
    KMeansFit {
        model: ClusterModel {
            centroids,
            cluster_sizes: sizes,
            id_fraction: Vec::new(),
            surrogate_label: Vec::new(),
            inertia: history[history.len() - 1],
            threshold: None,
        },
        assignments,
        inertia_history: history,
        iterations,
    }
}

/// Per-cluster (ID count, total count).
fn composition(k: usize, assignments: &[usize], origin: &[Origin]) -> Vec<(usize, usize)> {
    let mut counts = vec![(0usize, 0usize); k];
    for (&a, &o) in assignments.iter().zip(origin) {
        counts[a].1 += 1;
        if o == Origin::Id {
            counts[a].0 += 1;
        }
    }
    counts
}

fn fraction((id, total): (usize, usize)) -> f64 {
    if total == 0 {
        0.0
    } else {
        id as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SurrogateOptions {
    /// Keep known-ID rows at label 0 regardless of their cluster.
    pub pin_known_id: bool,
}

/// Fill `id_fraction` / `surrogate_label` on the model and return per-row
/// labels (0 = ID, 1 = OOD).
pub fn label_clusters(
    model: &mut ClusterModel,
    assignments: &[usize],
    origin: &[Origin],
    t: f64,
    opts: SurrogateOptions,
) -> Result<Vec<u8>> {
    if assignments.len() != origin.len() {
        return Err(Error::LengthMismatch {
            left: assignments.len(),
            right: origin.len(),
        });
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= model.k()) {
        return Err(Error::DimensionMismatch {
            expected: model.k(),
            found: bad,
        });
    }
    let comp = composition(model.k(), assignments, origin);
    model.id_fraction = comp.iter().map(|&c| fraction(c)).collect();
    model.surrogate_label = model
        .id_fraction
        .iter()
        .map(|&f| if f >= t { ClusterLabel::Id } else { ClusterLabel::Ood })
        .collect();
    model.threshold = Some(t);
    Ok(assignments
        .iter()
        .zip(origin)
        .map(|(&a, &o)| {
            if opts.pin_known_id && o == Origin::Id {
                0
            } else {
                model.surrogate_label[a].as_u8()
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyWeighting {
    /// Each cluster weighted by its share of rows.
    #[default]
    Size,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub entropy_h: f64,
    pub p_mis_id: f64,
    pub p_corr_id: f64,
    pub total: f64,
}

fn binary_entropy(p: f64) -> f64 {
    let h = |q: f64| if q > 0.0 { -q * q.log2() } else { 0.0 };
    h(p) + h(1.0 - p)
}

pub fn composite_objective(
    k: usize,
    assignments: &[usize],
    origin: &[Origin],
    t: f64,
    weighting: EntropyWeighting,
) -> Result<ObjectiveBreakdown> {
    if assignments.len() != origin.len() {
        return Err(Error::LengthMismatch {
            left: assignments.len(),
            right: origin.len(),
        });
    }
    let comp = composition(k, assignments, origin);
    let n_id: usize = comp.iter().map(|c| c.0).sum();
    if n_id == 0 {
        return Err(Error::NoIdSamples);
    }
    let n: usize = comp.iter().map(|c| c.1).sum();
    let occupied: Vec<&(usize, usize)> = comp.iter().filter(|c| c.1 > 0).collect();
    let entropy_h = match weighting {
        EntropyWeighting::Size => occupied
            .iter()
            .map(|&&c| c.1 as f64 / n as f64 * binary_entropy(fraction(c)))
            .sum(),
        EntropyWeighting::Uniform => {
            occupied.iter().map(|&&c| binary_entropy(fraction(c))).sum::<f64>() / occupied.len() as f64
        }
    };
    let mis: usize = comp.iter().filter(|&&c| fraction(c) < t).map(|c| c.0).sum();
    let p_mis_id = mis as f64 / n_id as f64;
    let p_corr_id = (n_id - mis) as f64 / n_id as f64;
    Ok(ObjectiveBreakdown {
        entropy_h,
        p_mis_id,
        p_corr_id,
        total: entropy_h + p_mis_id - p_corr_id,
    })
}

/// ID fraction of the nearest cluster, turned into an OOD score.
pub fn nearest_cluster_score(model: &ClusterModel, z: &[f32]) -> Result<(usize, f64)> {
    if model.id_fraction.len() != model.k() || model.k() == 0 {
        return Err(Error::UnfittedModel);
    }
    model.check_dim(z.len())?;
    let (idx, _) = model.nearest(z);
    Ok((idx, 1.0 - model.id_fraction[idx]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBounds {
    pub k_min: usize,
    pub k_max: usize,
    pub t_min: f64,
    pub t_max: f64,
}

impl SearchBounds {
    /// `k ∈ [2, ceil(0.3 m)]`, `t ∈ [0.01, 0.2]`.
    pub fn default_for(m: usize) -> Self {
        SearchBounds {
            k_min: 2,
            k_max: default_k(m).max(2),
            t_min: 0.01,
            t_max: 0.2,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k_min < 2 || self.k_max < self.k_min {
            return Err(Error::Config(format!(
                "invalid k bounds [{}, {}]",
                self.k_min, self.k_max
            )));
        }
        if !(self.t_min > 0.0 && self.t_min <= self.t_max && self.t_max < 1.0) {
            return Err(Error::Config(format!(
                "invalid t bounds [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchStrategy {
    Grid,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub k: usize,
    pub t: f64,
    pub objective: Option<ObjectiveBreakdown>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: ClusterConfig,
    pub best_objective: ObjectiveBreakdown,
    pub trials: Vec<Trial>,
}

fn linspace_usize(lo: usize, hi: usize, n: usize) -> Vec<usize> {
    if n <= 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (((hi - lo) as f64) * i as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

fn linspace_f64(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn candidate_points(bounds: &SearchBounds, n_trials: usize, strategy: SearchStrategy, seed: u64) -> Vec<(usize, f64)> {
    match strategy {
        SearchStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_5eed);
            (0..n_trials)
                .map(|_| {
                    let k = rng.random_range(bounds.k_min..=bounds.k_max);
                    let t = if bounds.t_max > bounds.t_min {
                        rng.random_range(bounds.t_min..=bounds.t_max)
                    } else {
                        bounds.t_min
                    };
                    (k, t)
                })
                .collect()
        }
        SearchStrategy::Grid => {
            let nk = (n_trials as f64).sqrt().ceil() as usize;
            let nt = n_trials.div_ceil(nk);
            let ks = linspace_usize(bounds.k_min, bounds.k_max, nk);
            let ts = linspace_f64(bounds.t_min, bounds.t_max, nt);
            ks.iter()
                .flat_map(|&k| ts.iter().map(move |&t| (k, t)))
                .take(n_trials)
                .collect()
        }
    }
}

/// Evaluate `n_trials` `(k, t)` candidates and keep the one with the lowest
/// composite objective (earliest trial on ties). k-means runs once per
/// distinct `k`, all with `base.seed`.
pub fn search_kt(
    x: &FeatureMatrix,
    origin: &[Origin],
    bounds: &SearchBounds,
    n_trials: usize,
    strategy: SearchStrategy,
    base: &ClusterConfig,
    weighting: EntropyWeighting,
) -> Result<SearchResult> {
    bounds.validate()?;
    if n_trials == 0 {
        return Err(Error::Config("n_trials must be at least 1".into()));
    }
    if origin.len() != x.n_rows() {
        return Err(Error::LengthMismatch {
            left: x.n_rows(),
            right: origin.len(),
        });
    }
    let points = candidate_points(bounds, n_trials, strategy, base.seed);
    let mut ks: Vec<usize> = points.iter().map(|p| p.0).collect();
    ks.sort_unstable();
    ks.dedup();
    let fits = par::map_slice(&ks, |&k| {
        let cfg = ClusterConfig { k, ..*base };
        kmeans_fit(x, &cfg).map(|f| f.assignments)
    });
    let by_k: BTreeMap<usize, Result<Vec<usize>>> = ks.into_iter().zip(fits).collect();

    let trials: Vec<Trial> = points
        .iter()
        .enumerate()
        .map(|(index, &(k, t))| {
            let res = match &by_k[&k] {
                Ok(a) => composite_objective(k, a, origin, t, weighting),
                Err(e) => Err(Error::Config(e.to_string())),
            };
            match res {
                Ok(o) => Trial { index, k, t, objective: Some(o), error: None },
                Err(e) => Trial { index, k, t, objective: None, error: Some(e.to_string()) },
            }
        })
        .collect();

    let best = trials
        .iter()
        .filter_map(|tr| tr.objective.map(|o| (tr, o)))
        .fold(None::<(&Trial, ObjectiveBreakdown)>, |acc, (tr, o)| match acc {
            Some((_, bo)) if bo.total <= o.total => acc,
            _ => Some((tr, o)),
        });
    let Some((best_trial, best_objective)) = best else {
        let msg = trials
            .first()
            .and_then(|t| t.error.clone())
            .unwrap_or_default();
        return Err(Error::Config(format!("every search trial failed: {msg}")));
    };
    Ok(SearchResult {
        best: ClusterConfig {
            k: best_trial.k,
            t: best_trial.t,
            ..*base
        },
        best_objective,
        trials,
    })
}
