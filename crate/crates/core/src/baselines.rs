//! Score-based OOD baselines over stored features and logits. Every score
//! follows the "higher means more OOD" convention.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::clustering::{nearest_cluster_score, ClusterModel};
use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::par;

pub const DEFAULT_EPSILON: f64 = 1e-6;
const SINGLE_CLASS: &str = "__all__";

fn check_logits(logits: &[f64]) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::TooFewLogits(logits.len()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("logits must be finite".into()));
    }
    Ok(max)
}

/// `1 - max softmax(logits)`.
pub fn msp_score(logits: &[f64]) -> Result<f64> {
    let max = check_logits(logits)?;
    let denom: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    Ok(1.0 - 1.0 / denom)
}

/// `-T · logsumexp(logits / T)`.
pub fn energy_score(logits: &[f64], temperature: f64) -> Result<f64> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidTemperature(temperature));
    }
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("logits must be finite and non-empty".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(-temperature * lse)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MahalanobisModel {
    pub class_means: BTreeMap<String, Vec<f64>>,
    /// Row-major `F×F`.
    pub shared_covariance_inverse: Vec<Vec<f64>>,
    /// Diagonal jitter that was actually added before factorization.
    pub epsilon: f64,
}

/// Lower-triangular Cholesky factor, or `None` if a pivot is not clearly
/// positive.
fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let max_diag = a.iter().enumerate().map(|(i, r)| r[i].abs()).fold(0.0, f64::max);
    let floor = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > floor) {
                    return None;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

fn inverse_from_cholesky(l: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = l.len();
    // L^{-1} by forward substitution, then A^{-1} = L^{-T} L^{-1}
    let mut linv = vec![vec![0.0; n]; n];
    for col in 0..n {
        for i in col..n {
            let rhs = if i == col { 1.0 } else { 0.0 };
            let s: f64 = (col..i).map(|k| l[i][k] * linv[k][col]).sum();
            linv[i][col] = (rhs - s) / l[i][i];
        }
    }
    let mut inv = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let v: f64 = (i..n).map(|k| linv[k][i] * linv[k][j]).sum();
            inv[i][j] = v;
            inv[j][i] = v;
        }
    }
    inv
}

/// Fit per-class means and one covariance pooled over classes. Without class
/// labels all rows form a single class. Jitter (`epsilon` scaled by the mean
/// variance, growing ×10) is added only if the plain factorization fails.
pub fn mahalanobis_fit(
    features: &FeatureMatrix,
    class_labels: Option<&[String]>,
    epsilon: f64,
) -> Result<MahalanobisModel> {
    let f = features.n_cols();
    if f == 0 {
        return Err(Error::EmptyTensor);
    }
    let labels: Vec<&str> = match class_labels {
        Some(l) => {
            if l.len() != features.n_rows() {
                return Err(Error::LengthMismatch {
                    left: features.n_rows(),
                    right: l.len(),
                });
            }
            l.iter().map(String::as_str).collect()
        }
        None => vec![SINGLE_CLASS; features.n_rows()],
    };
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    if groups.is_empty() {
        return Err(Error::TooFewSamplesPerClass {
            class: SINGLE_CLASS.into(),
            count: 0,
        });
    }
    let mut means = BTreeMap::new();
    let mut cov = vec![vec![0.0f64; f]; f];
    for (class, rows) in &groups {
        if rows.len() < 2 {
            return Err(Error::TooFewSamplesPerClass {
                class: class.to_string(),
                count: rows.len(),
            });
        }
        let mut mu = vec![0.0f64; f];
        for &i in rows {
            for (m, &v) in mu.iter_mut().zip(features.row(i)) {
                *m += v as f64;
            }
        }
        mu.iter_mut().for_each(|m| *m /= rows.len() as f64);
        for &i in rows {
            let d: Vec<f64> = features.row(i).iter().zip(&mu).map(|(&v, m)| v as f64 - m).collect();
            for a in 0..f {
                for b in 0..=a {
                    cov[a][b] += d[a] * d[b];
                }
            }
        }
        means.insert(class.to_string(), mu);
    }
    let n = features.n_rows() as f64;
    for a in 0..f {
        for b in 0..=a {
            cov[a][b] /= n;
            cov[b][a] = cov[a][b];
        }
    }
    let scale = {
        let tr = (0..f).map(|i| cov[i][i]).sum::<f64>() / f as f64;
        if tr > 0.0 {
            tr
        } else {
            1.0
        }
    };
    let mut jitter = 0.0;
    for attempt in 0..12 {
        let mut a = cov.clone();
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += jitter;
        }
        if let Some(l) = cholesky(&a) {
            return Ok(MahalanobisModel {
                class_means: means,
                shared_covariance_inverse: inverse_from_cholesky(&l),
                epsilon: jitter,
            });
        }
        jitter = epsilon * scale * 10f64.powi(attempt);
    }
    Err(Error::SingularCovariance)
}

pub fn mahalanobis_score(model: &MahalanobisModel, z: &[f32]) -> Result<f64> {
    let f = model.shared_covariance_inverse.len();
    if z.len() != f {
        return Err(Error::DimensionMismatch {
            expected: f,
            found: z.len(),
        });
    }
    let mut best = f64::INFINITY;
    for mu in model.class_means.values() {
        let d: Vec<f64> = z.iter().zip(mu).map(|(&v, m)| v as f64 - m).collect();
        let q: f64 = model
            .shared_covariance_inverse
            .iter()
            .zip(&d)
            .map(|(row, di)| di * row.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        best = best.min(q.max(0.0).sqrt());
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Tardis,
    ClusterOnly,
    Msp,
    Energy,
    Mahalanobis,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Tardis,
        Method::ClusterOnly,
        Method::Msp,
        Method::Energy,
        Method::Mahalanobis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tardis => "tardis",
            Method::ClusterOnly => "cluster-only",
            Method::Msp => "msp",
            Method::Energy => "energy",
            Method::Mahalanobis => "mahalanobis",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Per-row scores for one method. Logit-based methods need `logits`.
pub fn score_rows(
    method: Method,
    features: &FeatureMatrix,
    logits: Option<&FeatureMatrix>,
    models: &SuiteModels<'_>,
) -> Result<Vec<f64>> {
    let logit_rows = |f: &(dyn Fn(&[f64]) -> Result<f64> + Sync)| -> Result<Vec<f64>> {
        let l = logits.ok_or(Error::MissingLogits(features.n_rows()))?;
        if l.n_rows() != features.n_rows() {
            return Err(Error::MissingLogits(features.n_rows().abs_diff(l.n_rows())));
        }
        par::map_range(l.n_rows(), |i| {
            let row: Vec<f64> = l.row(i).iter().map(|&v| v as f64).collect();
            f(&row)
        })
        .into_iter()
        .collect()
    };
    let missing = |what: &str| Error::Config(format!("{} needs a {what} model", method.name()));
    match method {
        Method::Msp => logit_rows(&msp_score),
        Method::Energy => {
            let t = models.energy_temperature;
            logit_rows(&move |l: &[f64]| energy_score(l, t))
        }
        Method::Tardis => models.classifier.ok_or_else(|| missing("classifier"))?.predict_batch(features),
        Method::ClusterOnly => {
            let m = models.cluster.ok_or_else(|| missing("cluster"))?;
            par::map_range(features.n_rows(), |i| nearest_cluster_score(m, features.row(i)).map(|r| r.1))
                .into_iter()
                .collect()
        }
        Method::Mahalanobis => {
            let m = models.mahalanobis.ok_or_else(|| missing("mahalanobis"))?;
            par::map_range(features.n_rows(), |i| mahalanobis_score(m, features.row(i)))
                .into_iter()
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteModels<'a> {
    pub classifier: Option<&'a ClassifierModel>,
    pub cluster: Option<&'a ClusterModel>,
    pub mahalanobis: Option<&'a MahalanobisModel>,
    pub energy_temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unavailable: Option<String>,
}

/// Evaluate every method on the same rows. Methods whose inputs are missing
/// are listed as unavailable instead of failing the suite.
pub fn run_baseline_suite(
    features: &FeatureMatrix,
    labels: &[u8],
    logits: Option<&FeatureMatrix>,
    models: &SuiteModels<'_>,
) -> Result<Vec<SuiteEntry>> {
    let results = par::map_slice(&Method::ALL, |&method| {
        let scores = score_rows(method, features, logits, models);
        (method, scores)
    });
    let mut out = Vec::new();
    for (method, scores) in results {
        match scores {
            Ok(s) => {
                // only g has a calibrated probability threshold
                let threshold = match method {
                    Method::Tardis => models.classifier.map_or(0.5, |c| c.threshold),
                    _ => 0.5,
                };
                out.push(SuiteEntry {
                    method,
                    report: Some(EvalReport::evaluate(&s, labels, threshold)?),
                    unavailable: None,
                });
            }
            Err(e @ (Error::MissingLogits(_) | Error::Config(_))) => out.push(SuiteEntry {
                method,
                report: None,
                unavailable: Some(e.to_string()),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn msp_examples() {
        assert_eq!(msp_score(&[0.0, 0.0]).unwrap(), 0.5);
        assert!(msp_score(&[1000.0, 0.0]).unwrap() < 1e-9);
        let e2 = 2f64.exp();
        assert!((msp_score(&[2.0, 0.0]).unwrap() - (1.0 - e2 / (e2 + 1.0))).abs() < 1e-15);
        assert!((msp_score(&[2.0, 0.0]).unwrap() - 0.11920).abs() < 1e-5);
        assert!(matches!(msp_score(&[1.0]), Err(Error::TooFewLogits(1))));
    }

    #[test]
    fn energy_examples() {
        assert!((energy_score(&[0.0, 0.0], 1.0).unwrap() + std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(energy_score(&[3.5], 1.0).unwrap(), -3.5);
        assert!(matches!(energy_score(&[0.0], 0.0), Err(Error::InvalidTemperature(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let l: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let t = rng.random_range(0.5..3.0);
            let naive = -t * l.iter().map(|v| (v / t).exp()).sum::<f64>().ln();
            assert!((energy_score(&l, t).unwrap() - naive).abs() < 1e-9);
        }
    }

    #[test]
    fn energy_low_temperature_tends_to_max() {
        let l = [0.3, -1.2, 2.5, 2.4];
        assert!((energy_score(&l, 1e-6).unwrap() + 2.5).abs() < 1e-4);
    }

    #[test]
    fn identity_covariance_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let vals: Vec<f32> = (0..n * 3).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
        let x = FeatureMatrix::new(n, 3, vals).unwrap();
        let m = mahalanobis_fit(&x, None, DEFAULT_EPSILON).unwrap();
        assert_eq!(m.class_means.len(), 1);
        for (i, row) in m.shared_covariance_inverse.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let id = if i == j { 1.0 } else { 0.0 };
                assert!((v - id).abs() < 0.1, "inv[{i}][{j}] = {v}");
            }
        }
    }

    #[test]
    fn identical_points_are_regularized() {
        let x = FeatureMatrix::new(2, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        let m = mahalanobis_fit(&x, None, DEFAULT_EPSILON).unwrap();
        assert!(m.epsilon > 0.0);
        assert_eq!(mahalanobis_score(&m, &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn too_few_per_class() {
        let x = FeatureMatrix::new(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let labels = vec!["a".to_string(), "a".to_string(), "b".to_string()];
        assert!(matches!(
            mahalanobis_fit(&x, Some(&labels), DEFAULT_EPSILON),
            Err(Error::TooFewSamplesPerClass { count: 1, .. })
        ));
    }

    #[test]
    fn euclidean_reduction() {
        let m = MahalanobisModel {
            class_means: BTreeMap::from([("a".to_string(), vec![0.0, 0.0])]),
            shared_covariance_inverse: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            epsilon: 0.0,
        };
        assert_eq!(mahalanobis_score(&m, &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(mahalanobis_score(&m, &[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(mahalanobis_score(&m, &[0.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn two_class_score_matches_naive_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<f32> = (0..40 * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = FeatureMatrix::new(40, 3, vals).unwrap();
        let labels: Vec<String> = (0..40).map(|i| if i % 2 == 0 { "a" } else { "b" }.into()).collect();
        let m = mahalanobis_fit(&x, Some(&labels), DEFAULT_EPSILON).unwrap();
        assert_eq!(m.class_means.len(), 2);
        for _ in 0..10 {
            let z: Vec<f32> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let naive = m
                .class_means
                .values()
                .map(|mu| {
                    let mut q = 0.0;
                    for i in 0..3 {
                        for j in 0..3 {
                            q += (z[i] as f64 - mu[i]) * m.shared_covariance_inverse[i][j] * (z[j] as f64 - mu[j]);
                        }
                    }
                    q.sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((mahalanobis_score(&m, &z).unwrap() - naive).abs() < 1e-9);
        }
    }

    #[test]
    fn inverse_is_inverse() {
        let a = vec![vec![4.0, 1.0, 0.5], vec![1.0, 3.0, 0.2], vec![0.5, 0.2, 2.0]];
        let inv = inverse_from_cholesky(&cholesky(&a).unwrap());
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| a[i][k] * inv[k][j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn suite_without_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f32> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = FeatureMatrix::new(20, 2, vals).unwrap();
        let labels: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
        let g = ClassifierModel::zeros(2, crate::classifier::TrainedOn::Surrogate);
        let maha = mahalanobis_fit(&x, None, DEFAULT_EPSILON).unwrap();
        let cluster = ClusterModel {
            centroids: vec![vec![0.0, 0.0], vec![0.5, 0.5]],
            cluster_sizes: vec![10, 10],
            id_fraction: vec![0.9, 0.1],
            surrogate_label: vec![],
            inertia: 0.0,
            threshold: Some(0.1),
        };
        let models = SuiteModels {
            classifier: Some(&g),
            cluster: Some(&cluster),
            mahalanobis: Some(&maha),
            energy_temperature: 1.0,
        };
        let suite = run_baseline_suite(&x, &labels, None, &models).unwrap();
        let available: Vec<Method> = suite.iter().filter(|e| e.report.is_some()).map(|e| e.method).collect();
        assert_eq!(available, vec![Method::Tardis, Method::ClusterOnly, Method::Mahalanobis]);
    }
}
