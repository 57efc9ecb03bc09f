//! Detector evaluation. OOD is the positive class (label 1) and higher scores
//! mean "more OOD" throughout.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    (labels.len() - pos, pos)
}

fn check_pair(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    let (neg, pos) = class_counts(labels);
    if neg == 0 || pos == 0 {
        return Err(Error::SingleClass);
    }
    Ok((neg, pos))
}

/// Rank-based AUROC (Mann-Whitney U with midranks for ties).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (neg, pos) = check_pair(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (2 × midrank) over positives, kept integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1, midrank doubled:
        let twice_mid = (i + 1 + j + 1) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&r| labels[r] == 1).count() as u64;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j + 1;
    }
    let p = pos as u64;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// False-positive rate at the largest threshold `t` such that at least
/// `tpr_target` of OOD scores satisfy `score >= t`.
pub fn fpr_at_tpr(scores: &[f64], labels: &[u8], tpr_target: f64) -> Result<f64> {
    let (neg, pos) = check_pair(scores, labels)?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::Config(format!("tpr target {tpr_target} outside (0, 1]")));
    }
    let mut ood: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    ood.sort_by(|a, b| b.total_cmp(a));
    let needed = (1..=pos)
        .find(|&m| m as f64 / pos as f64 >= tpr_target)
        .unwrap_or(pos);
    let threshold = ood[needed - 1];
    let fp = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| l == 0 && s >= threshold)
        .count();
    Ok(fp as f64 / neg as f64)
}

pub fn fpr95(scores: &[f64], labels: &[u8]) -> Result<f64> {
    fpr_at_tpr(scores, labels, 0.95)
}

pub fn accuracy(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyStats);
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Biased sample skewness `g1 = m3 / m2^(3/2)`.
pub fn skewness(scores: &[f64]) -> Result<f64> {
    if scores.len() < 3 {
        return Err(Error::DegenerateDistribution("skewness needs at least 3 values"));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let (mut m2, mut m3) = (0.0, 0.0);
    for &s in scores {
        let d = s - mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    m2 /= n;
    m3 /= n;
    if m2 <= 0.0 {
        return Err(Error::DegenerateDistribution("zero variance"));
    }
    Ok(m3 / m2.powf(1.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub significant: bool,
}

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sided Welch t-test. When both samples have zero variance the result
/// is `t = 0, p = 1` for equal means and `t = ±∞, p = 0` otherwise.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    let short = a.len().min(b.len());
    if short < 2 {
        return Err(Error::TooFewRuns {
            needed: 2,
            available: short,
        });
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        let diff = ma - mb;
        let (t, p) = if diff == 0.0 {
            (0.0, 1.0)
        } else {
            (diff.signum() * f64::INFINITY, 0.0)
        };
        return Ok(WelchTest {
            t,
            df: na + nb - 2.0,
            p_value: p,
            significant: p < SIGNIFICANCE_LEVEL,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let p = two_sided_t_p_value(t, df);
    Ok(WelchTest {
        t,
        df,
        p_value: p,
        significant: p < SIGNIFICANCE_LEVEL,
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn two_sided_t_p_value(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let x = df / (df + t * t);
    beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Fraction of label-1 rows per named stage.
pub fn stage_ood_ratio<S: AsRef<str>>(stages: &[(S, &[u8])]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (name, labels) in stages {
        if labels.is_empty() {
            return Err(Error::EmptyStage(name.as_ref().to_string()));
        }
        let ood = labels.iter().filter(|&&l| l == 1).count();
        out.insert(name.as_ref().to_string(), ood as f64 / labels.len() as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation (n − 1); zero for a single value.
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub fpr95: f64,
    pub accuracy: f64,
    pub n_id: usize,
    pub n_ood: usize,
    /// `None` when the score distribution is degenerate.
    pub skewness: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub stage_ood_ratios: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runs: Option<RunSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub per_run: Vec<EvalReport>,
    pub auroc: MeanStd,
    pub fpr95: MeanStd,
    pub accuracy: MeanStd,
}

impl RunSummary {
    pub fn from_runs(per_run: Vec<EvalReport>) -> Option<RunSummary> {
        let col = |f: fn(&EvalReport) -> f64| per_run.iter().map(f).collect::<Vec<_>>();
        Some(RunSummary {
            auroc: MeanStd::of(&col(|r| r.auroc))?,
            fpr95: MeanStd::of(&col(|r| r.fpr95))?,
            accuracy: MeanStd::of(&col(|r| r.accuracy))?,
            per_run,
        })
    }
}

impl EvalReport {
    /// Evaluate OOD scores; predicted labels are `score >= threshold`.
    pub fn evaluate(scores: &[f64], labels: &[u8], threshold: f64) -> Result<EvalReport> {
        let (n_id, n_ood) = check_pair(scores, labels)?;
        let pred: Vec<u8> = scores.iter().map(|&s| u8::from(s >= threshold)).collect();
        Ok(EvalReport {
            auroc: auroc(scores, labels)?,
            fpr95: fpr95(scores, labels)?,
            accuracy: accuracy(&pred, labels)?,
            n_id,
            n_ood,
            skewness: skewness(scores).ok(),
            stage_ood_ratios: BTreeMap::new(),
            runs: None,
        })
    }

    /// Mean of per-run metrics, with the runs attached.
    pub fn aggregate(per_run: Vec<EvalReport>) -> Option<EvalReport> {
        let summary = RunSummary::from_runs(per_run)?;
        let first = &summary.per_run[0];
        let skews: Vec<f64> = summary.per_run.iter().filter_map(|r| r.skewness).collect();
        Some(EvalReport {
            auroc: summary.auroc.mean,
            fpr95: summary.fpr95.mean,
            accuracy: summary.accuracy.mean,
            n_id: first.n_id,
            n_ood: first.n_ood,
            skewness: MeanStd::of(&skews).map(|m| m.mean),
            stage_ood_ratios: BTreeMap::new(),
            runs: Some(summary),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let (mut np, mut nn) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            if li != 1 {
                continue;
            }
            np += 1.0;
            for (j, &lj) in labels.iter().enumerate() {
                if lj == 0 {
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        nn += labels.iter().filter(|&&l| l == 0).count() as f64;
        num / (np * nn)
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.5, 0.6], &[1, 1]), Err(Error::SingleClass)));
    }

    #[test]
    fn auroc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..50).map(|_| rng.random_range(0..10) as f64 / 10.0).collect();
            let mut labels: Vec<u8> = (0..50).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            assert_eq!(auroc(&scores, &labels).unwrap(), pairwise_auroc(&scores, &labels));
        }
    }

    #[test]
    fn fpr_examples() {
        // OOD [0.9, 0.8], ID [0.1, 0.85]
        assert_eq!(fpr95(&[0.9, 0.8, 0.1, 0.85], &[1, 1, 0, 0]).unwrap(), 0.5);
        assert_eq!(fpr95(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 0.0);
        assert_eq!(fpr95(&[0.3, 0.3, 0.3, 0.3], &[1, 1, 0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1], &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert!(matches!(accuracy(&[0], &[0, 1]), Err(Error::LengthMismatch { .. })));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<u8> = (0..100).map(|_| rng.random_range(0..2)).collect();
        let b: Vec<u8> = (0..100).map(|_| rng.random_range(0..2)).collect();
        let mut count = 0;
        for i in 0..100 {
            if a[i] == b[i] {
                count += 1;
            }
        }
        assert_eq!(accuracy(&a, &b).unwrap(), count as f64 / 100.0);
    }

    #[test]
    fn skewness_examples() {
        assert_eq!(skewness(&[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(skewness(&[0.0, 0.0, 0.0, 1.0]).unwrap() > 0.0);
        assert!(skewness(&[1.0, 1.0, 1.0]).is_err());
        assert!(skewness(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn skewness_matches_moment_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..50).map(|_| rng.random::<f64>().powi(3)).collect();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let m2 = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let m3 = x.iter().map(|v| (v - mean) * (v - mean) * (v - mean)).sum::<f64>() / n;
        let expected = m3 / (m2 * m2.sqrt());
        assert!((skewness(&x).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn welch_examples() {
        let a = [0.2, 0.4, 0.3, 0.9];
        let r = welch_t_test(&a, &a).unwrap();
        assert_eq!((r.t, r.p_value, r.significant), (0.0, 1.0, false));
        let r = welch_t_test(&[0.0; 4], &[10.0, 10.0, 10.0, 10.1]).unwrap();
        assert!(r.significant);
        assert!(matches!(welch_t_test(&[1.0], &[1.0, 2.0]), Err(Error::TooFewRuns { .. })));
        let r = welch_t_test(&[1.0; 5], &[1.0; 5]).unwrap();
        assert_eq!((r.t, r.p_value, r.significant), (0.0, 1.0, false));
    }

    /// Two-sided tail of Student's t by composite Simpson quadrature of the
    /// density over [0, |t|].
    fn quadrature_p(t: f64, df: f64) -> f64 {
        use statrs::function::gamma::ln_gamma;
        let c = (ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0)).exp() / (df * std::f64::consts::PI).sqrt();
        let pdf = |x: f64| c * (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
        let n = 20_000;
        let h = t.abs() / n as f64;
        let mut s = pdf(0.0) + pdf(t.abs());
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(i as f64 * h);
        }
        1.0 - 2.0 * s * h / 3.0
    }

    #[test]
    fn welch_p_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let a: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.random_range(0.2..1.3)).collect();
            let r = welch_t_test(&a, &b).unwrap();
            assert!((r.p_value - quadrature_p(r.t, r.df)).abs() < 1e-6);
        }
    }

    #[test]
    fn stage_ratios() {
        let mut s = vec![0u8; 100];
        s[..17].fill(1);
        let r = stage_ood_ratio(&[("clustering", s.as_slice()), ("validation", &[0, 0][..])]).unwrap();
        assert_eq!(r["clustering"], 0.17);
        assert_eq!(r["validation"], 0.0);
        assert!(matches!(stage_ood_ratio(&[("x", &[][..])]), Err(Error::EmptyStage(_))));
    }

    #[test]
    fn aggregate_recomputes_from_runs() {
        let runs = vec![
            EvalReport { auroc: 0.8, fpr95: 0.4, accuracy: 0.7, ..Default::default() },
            EvalReport { auroc: 0.9, fpr95: 0.2, accuracy: 0.9, ..Default::default() },
        ];
        let agg = EvalReport::aggregate(runs).unwrap();
        assert!((agg.auroc - 0.85).abs() < 1e-15);
        let s = agg.runs.unwrap();
        assert!((s.auroc.std - (0.005f64).sqrt()).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
            (2usize..60).prop_flat_map(|n| {
                (
                    prop::collection::vec(-10.0f64..10.0, n),
                    prop::collection::vec(0u8..2, n),
                )
            })
            .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
        }

        proptest! {
            #[test]
            fn auroc_invariant_under_monotone_transform((s, l) in scored()) {
                let t: Vec<f64> = s.iter().map(|x| (x / 3.0).exp() * 2.0 + 1.0).collect();
                prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
            }

            #[test]
            fn auroc_complement((s, l) in scored()) {
                let neg: Vec<f64> = s.iter().map(|x| -x).collect();
                let mut sorted = s.clone();
                sorted.sort_by(f64::total_cmp);
                prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
                let sum = auroc(&s, &l).unwrap() + auroc(&neg, &l).unwrap();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }

            #[test]
            fn auroc_label_flip_symmetry((s, l) in scored()) {
                let neg: Vec<f64> = s.iter().map(|x| -x).collect();
                let flipped: Vec<u8> = l.iter().map(|x| 1 - x).collect();
                prop_assert!((auroc(&s, &l).unwrap() - auroc(&neg, &flipped).unwrap()).abs() < 1e-12);
            }

            #[test]
            fn fpr_non_increasing_as_target_drops((s, l) in scored(), a in 0.05f64..1.0, b in 0.05f64..1.0) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(fpr_at_tpr(&s, &l, lo).unwrap() <= fpr_at_tpr(&s, &l, hi).unwrap());
            }

            #[test]
            fn welch_antisymmetric(
                a in prop::collection::vec(-5.0f64..5.0, 2..12),
                b in prop::collection::vec(-5.0f64..5.0, 2..12),
            ) {
                let ab = welch_t_test(&a, &b).unwrap();
                let ba = welch_t_test(&b, &a).unwrap();
                prop_assert!((ab.t + ba.t).abs() < 1e-9 || (ab.t.is_infinite() && ab.t == -ba.t));
                prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
            }
        }
    }
}
