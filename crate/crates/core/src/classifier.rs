//! Binary logistic-regression distribution classifier over standardized
//! pooled features. Output is the probability that a sample is OOD.

use serde::{Deserialize, Serialize};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::par;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainedOn {
    Surrogate,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_iter: usize,
    /// Initial step size; later steps start from a Barzilai-Borwein estimate.
    pub learning_rate: f64,
    /// L2 strength on the weights (bias excluded). `None` means `1 / n_samples`.
    pub l2_lambda: Option<f64>,
    /// Stop when the relative loss change drops below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iter: 500,
            learning_rate: 0.1,
            l2_lambda: None,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let lambda_ok = self.l2_lambda.is_none_or(|l| l > 0.0 && l.is_finite());
        if self.max_iter == 0 || !(self.learning_rate > 0.0) || !(self.tol > 0.0) || !lambda_ok {
            return Err(Error::Config("training parameters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_mean: Vec<f64>,
    /// Zero-variance features are stored with std 1.
    pub feature_std: Vec<f64>,
    pub trained_on: TrainedOn,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl ClassifierModel {
    /// A model with all-zero weights; predicts 0.5 everywhere.
    pub fn zeros(dim: usize, trained_on: TrainedOn) -> Self {
        ClassifierModel {
            weights: vec![0.0; dim],
            bias: 0.0,
            feature_mean: vec![0.0; dim],
            feature_std: vec![1.0; dim],
            trained_on,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// `w · standardize(z) + b`.
    pub fn logit(&self, z: &[f32]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: z.len(),
            });
        }
        let mut acc = self.bias;
        for (((&v, w), m), s) in z
            .iter()
            .zip(&self.weights)
            .zip(&self.feature_mean)
            .zip(&self.feature_std)
        {
            acc += w * (v as f64 - m) / s;
        }
        Ok(acc)
    }

    pub fn predict_proba(&self, z: &[f32]) -> Result<f64> {
        self.logit(z).map(sigmoid)
    }

    pub fn predict_label(&self, z: &[f32]) -> Result<u8> {
        self.predict_proba(z).map(|p| self.label_for(p))
    }

    pub fn label_for(&self, proba: f64) -> u8 {
        u8::from(proba >= self.threshold)
    }

    pub fn predict_batch(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        if x.n_cols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.n_cols(),
            });
        }
        par::map_range(x.n_rows(), |i| self.predict_proba(x.row(i)))
            .into_iter()
            .collect()
    }
}

/// Mean cross-entropy plus `(l2 / 2)·‖w‖²` over standardized features.
/// Parameters are laid out as `[w_0, .., w_{F-1}, b]`.
#[derive(Debug, Clone)]
pub struct LogisticObjective {
    n: usize,
    dim: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    pub l2: f64,
}

const CHUNK_ROWS: usize = 256;

impl LogisticObjective {
    /// `x` is used as-is (callers standardize first).
    pub fn new(x: &FeatureMatrix, labels: &[u8], l2: f64) -> Result<Self> {
        if labels.len() != x.n_rows() {
            return Err(Error::DimensionMismatch {
                expected: x.n_rows(),
                found: labels.len(),
            });
        }
        Ok(LogisticObjective {
            n: x.n_rows(),
            dim: x.n_cols(),
            x: x.values().iter().map(|&v| v as f64).collect(),
            y: labels.iter().map(|&l| f64::from(l)).collect(),
            l2,
        })
    }

    fn from_standardized(x: Vec<f64>, dim: usize, labels: &[u8], l2: f64) -> Self {
        LogisticObjective {
            n: labels.len(),
            dim,
            x,
            y: labels.iter().map(|&l| f64::from(l)).collect(),
            l2,
        }
    }

    pub fn n_params(&self) -> usize {
        self.dim + 1
    }

    fn margin(&self, i: usize, p: &[f64]) -> f64 {
        let row = &self.x[i * self.dim..(i + 1) * self.dim];
        row.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() + p[self.dim]
    }

    /// Sum `f(i)` over rows in fixed-size chunks, reduced in chunk order.
    fn chunked_sum<T, F>(&self, zero: T, f: F, add: fn(&mut T, &T)) -> T
    where
        T: Send + Sync + Clone,
        F: Fn(usize, &mut T) + Sync + Send,
    {
        let starts: Vec<usize> = (0..self.n).step_by(CHUNK_ROWS).collect();
        let partials = par::map_slice(&starts, |&s| {
            let mut acc = zero.clone();
            for i in s..(s + CHUNK_ROWS).min(self.n) {
                f(i, &mut acc);
            }
            acc
        });
        let mut total = zero;
        for p in &partials {
            add(&mut total, p);
        }
        total
    }

    pub fn loss(&self, p: &[f64]) -> f64 {
        let ce = self.chunked_sum(
            0.0f64,
            |i, acc| {
                let z = self.margin(i, p);
                *acc += softplus(z) - self.y[i] * z;
            },
            |a, b| *a += *b,
        );
        let reg: f64 = p[..self.dim].iter().map(|w| w * w).sum();
        ce / self.n as f64 + 0.5 * self.l2 * reg
    }

    pub fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let dim = self.dim;
        let mut g = self.chunked_sum(
            vec![0.0f64; dim + 1],
            |i, acc| {
                let r = sigmoid(self.margin(i, p)) - self.y[i];
                let row = &self.x[i * dim..(i + 1) * dim];
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += r * v;
                }
                acc[dim] += r;
            },
            |a, b| a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
        );
        let n = self.n as f64;
        for (j, gj) in g.iter_mut().enumerate() {
            *gj /= n;
            if j < dim {
                *gj += self.l2 * p[j];
            }
        }
        g
    }
}

/// Largest relative difference between the analytic gradient and central
/// finite differences with step `1e-5`.
pub fn gradient_check(obj: &LogisticObjective, params: &[f64]) -> f64 {
    const H: f64 = 1e-5;
    let analytic = obj.gradient(params);
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for j in 0..params.len() {
        p[j] = params[j] + H;
        let up = obj.loss(&p);
        p[j] = params[j] - H;
        let down = obj.loss(&p);
        p[j] = params[j];
        let numeric = (up - down) / (2.0 * H);
        let denom = analytic[j].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[j] - numeric).abs() / denom);
    }
    worst
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Loss at the start and after every accepted step.
    pub losses: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn standardization(x: &FeatureMatrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.n_rows() as f64;
    let f = x.n_cols();
    let mut mean = vec![0.0f64; f];
    for r in x.rows() {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; f];
    for r in x.rows() {
        for ((s, &v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

pub fn train(
    x: &FeatureMatrix,
    labels: &[u8],
    cfg: &TrainConfig,
    trained_on: TrainedOn,
) -> Result<(ClassifierModel, TrainTrace)> {
    cfg.validate()?;
    if labels.len() != x.n_rows() {
        return Err(Error::DimensionMismatch {
            expected: x.n_rows(),
            found: labels.len(),
        });
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Config("labels must be 0 or 1".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::SingleClassTrainingSet);
    }
    let (mean, std) = standardization(x);
    let dim = x.n_cols();
    let standardized: Vec<f64> = x
        .rows()
        .flat_map(|r| {
            r.iter()
                .zip(&mean)
                .zip(&std)
                .map(|((&v, m), s)| (v as f64 - m) / s)
                .collect::<Vec<_>>()
        })
        .collect();
    let l2 = cfg.l2_lambda.unwrap_or(1.0 / x.n_rows() as f64);
    let obj = LogisticObjective::from_standardized(standardized, dim, labels, l2);

    let (params, trace) = minimize(&obj, cfg);
    let bias = params[dim];
    let mut weights = params;
    weights.truncate(dim);
    Ok((
        ClassifierModel {
            weights,
            bias,
            feature_mean: mean,
            feature_std: std,
            trained_on,
            threshold: DEFAULT_THRESHOLD,
        },
        trace,
    ))
}

/// Gradient descent with Armijo backtracking. Trial steps come from the
/// Barzilai-Borwein formula after the first iteration.
fn minimize(obj: &LogisticObjective, cfg: &TrainConfig) -> (Vec<f64>, TrainTrace) {
    const ARMIJO: f64 = 1e-4;
    const MAX_HALVINGS: usize = 60;
    let mut p = vec![0.0f64; obj.n_params()];
    let mut loss = obj.loss(&p);
    let mut grad = obj.gradient(&p);
    let mut trace = TrainTrace {
        losses: vec![loss],
        ..Default::default()
    };
    let mut step = cfg.learning_rate;
    for _ in 0..cfg.max_iter {
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        if g2 == 0.0 {
            trace.converged = true;
            break;
        }
        let mut accepted = None;
        let mut s = step;
        for _ in 0..MAX_HALVINGS {
            let cand: Vec<f64> = p.iter().zip(&grad).map(|(a, g)| a - s * g).collect();
            let l = obj.loss(&cand);
            if l <= loss - ARMIJO * s * g2 {
                accepted = Some((cand, l, s));
                break;
            }
            s *= 0.5;
        }
        let Some((next, next_loss, _)) = accepted else {
            trace.converged = true;
            break;
        };
        let next_grad = obj.gradient(&next);
        let (mut sy, mut ss) = (0.0, 0.0);
        for j in 0..p.len() {
            let dp = next[j] - p[j];
            let dg = next_grad[j] - grad[j];
            sy += dp * dg;
            ss += dp * dp;
        }
        step = if sy > 0.0 { (ss / sy).min(1e6) } else { cfg.learning_rate };
        let rel = (loss - next_loss).abs() / loss.abs().max(1e-12);
        p = next;
        loss = next_loss;
        grad = next_grad;
        trace.losses.push(loss);
        trace.iterations += 1;
        if rel < cfg.tol {
            trace.converged = true;
            break;
        }
    }
    (p, trace)
}
