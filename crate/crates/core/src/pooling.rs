//! Spatial downsampling of `C×H×W` activation tensors into feature vectors.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, FeatureMatrix};
use crate::error::{Error, Result};
use crate::par;

pub const DEFAULT_PCA_COMPONENTS: usize = 10;

pub type TensorShape = (usize, usize, usize);

/// Borrowed activation tensor, channel-major then row-major spatial.
#[derive(Debug, Clone, Copy)]
pub struct ActivationTensor<'a> {
    pub shape: TensorShape,
    pub values: &'a [f32],
}

impl<'a> ActivationTensor<'a> {
    pub fn new(shape: TensorShape, values: &'a [f32]) -> Result<Self> {
        let (c, h, w) = shape;
        if c * h * w == 0 {
            return Err(Error::EmptyTensor);
        }
        if values.len() != c * h * w {
            return Err(Error::DimensionMismatch {
                expected: c * h * w,
                found: values.len(),
            });
        }
        Ok(ActivationTensor { shape, values })
    }

    fn channels(&self) -> impl Iterator<Item = &'a [f32]> {
        let (_, h, w) = self.shape;
        self.values.chunks_exact(h * w)
    }
}

/// Fitted principal-component basis over flattened tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub shape: TensorShape,
    pub mean: Vec<f64>,
    /// `n_components` unit vectors of length `C·H·W`, by decreasing variance.
    pub components: Vec<Vec<f64>>,
}

impl PcaBasis {
    pub fn project(&self, x: &[f32]) -> Vec<f32> {
        self.components
            .iter()
            .map(|v| {
                v.iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(vi, (&xi, mi))| vi * (xi as f64 - mi))
                    .sum::<f64>() as f32
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum PoolingMethod {
    MeanStd,
    #[serde(rename = "avg")]
    AvgPool,
    #[serde(rename = "max")]
    MaxPool,
    Pca {
        n_components: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        basis: Option<PcaBasis>,
    },
}

impl PoolingMethod {
    pub fn pca(n_components: usize) -> Self {
        PoolingMethod::Pca {
            n_components,
            basis: None,
        }
    }

    pub fn output_dim(&self, channels: usize) -> usize {
        match self {
            PoolingMethod::MeanStd => 2 * channels,
            PoolingMethod::AvgPool | PoolingMethod::MaxPool => channels,
            PoolingMethod::Pca { n_components, .. } => *n_components,
        }
    }
}

pub fn pool(t: &ActivationTensor<'_>, method: &PoolingMethod) -> Result<Vec<f32>> {
    let (c, h, w) = t.shape;
    if c * h * w == 0 || t.values.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let hw = (h * w) as f64;
    Ok(match method {
        PoolingMethod::MaxPool => t
            .channels()
            .map(|ch| ch.iter().copied().fold(f32::NEG_INFINITY, f32::max))
            .collect(),
        PoolingMethod::AvgPool => t
            .channels()
            .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / hw) as f32)
            .collect(),
        PoolingMethod::MeanStd => {
            let mut means = Vec::with_capacity(c);
            let mut stds = Vec::with_capacity(c);
            for ch in t.channels() {
                let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / hw;
                let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / hw;
                means.push(mean as f32);
                stds.push(var.sqrt() as f32);
            }
            means.extend(stds);
            means
        }
        PoolingMethod::Pca { basis, .. } => {
            let basis = basis.as_ref().ok_or(Error::UnfittedPca)?;
            if basis.shape != t.shape {
                return Err(Error::ShapeMismatch {
                    expected: basis.shape,
                    found: t.shape,
                });
            }
            basis.project(t.values)
        }
    })
}

/// Fit a PCA basis by SVD of the centered sample matrix.
pub fn fit_pca(samples: &[ActivationTensor<'_>], n_components: usize) -> Result<PoolingMethod> {
    let first = samples.first().ok_or(Error::TooFewSamples {
        needed: n_components.max(1),
        available: 0,
    })?;
    let shape = first.shape;
    let d = shape.0 * shape.1 * shape.2;
    if n_components == 0 {
        return Err(Error::Config("PCA needs at least one component".into()));
    }
    if samples.len() < n_components {
        return Err(Error::TooFewSamples {
            needed: n_components,
            available: samples.len(),
        });
    }
    if n_components > d {
        return Err(Error::TooFewSamples {
            needed: n_components,
            available: d,
        });
    }
    if let Some(bad) = samples.iter().find(|s| s.shape != shape) {
        return Err(Error::ShapeMismatch {
            expected: shape,
            found: bad.shape,
        });
    }
    let n = samples.len();
    let mut mean = vec![0.0f64; d];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s.values) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| samples[i].values[j] as f64 - mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let components = order
        .into_iter()
        .take(n_components)
        .map(|r| {
            let mut v: Vec<f64> = v_t.row(r).iter().copied().collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
            // sign: largest-magnitude entry positive
            let pivot = v
                .iter()
                .copied()
                .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect::<Vec<_>>();
    if components.len() < n_components {
        return Err(Error::TooFewSamples {
            needed: n_components,
            available: components.len(),
        });
    }
    Ok(PoolingMethod::Pca {
        n_components,
        basis: Some(PcaBasis {
            shape,
            mean,
            components,
        }),
    })
}

/// Pool every tensor of a raw-tensor dataset. An unfitted PCA method is fitted
/// on this batch first; the method actually applied is returned alongside.
pub fn pool_batch(
    manifest: &DatasetManifest,
    raw: &FeatureMatrix,
    method: &PoolingMethod,
) -> Result<(DatasetManifest, FeatureMatrix, PoolingMethod)> {
    let shape = manifest
        .tensor_shape
        .ok_or_else(|| Error::MalformedManifest("manifest has no tensor_shape".into()))?;
    let (c, h, w) = shape;
    if raw.n_cols() != c * h * w || raw.n_rows() != manifest.len() {
        return Err(Error::DimensionMismatch {
            expected: manifest.len() * c * h * w,
            found: raw.n_rows() * raw.n_cols(),
        });
    }
    let method = match method {
        PoolingMethod::Pca {
            n_components,
            basis: None,
        } => {
            let tensors = raw
                .rows()
                .map(|r| ActivationTensor::new(shape, r))
                .collect::<Result<Vec<_>>>()?;
            fit_pca(&tensors, *n_components)?
        }
        m => m.clone(),
    };
    let out_dim = method.output_dim(c);
    let pooled = par::map_range(raw.n_rows(), |i| {
        ActivationTensor::new(shape, raw.row(i))
            .and_then(|t| pool(&t, &method))
            .map_err(|e| Error::Sample {
                sample_id: manifest.samples[i].sample_id.clone(),
                source: Box::new(e),
            })
    });
    let mut values = Vec::with_capacity(raw.n_rows() * out_dim);
    for p in pooled {
        values.extend(p?);
    }
    let matrix = FeatureMatrix::new(raw.n_rows(), out_dim, values)?;
    let mut out = DatasetManifest::for_features(manifest.samples.clone(), out_dim);
    out.logit_dim = manifest.logit_dim;
    out.logits_file = manifest.logits_file.clone();
    Ok((out, matrix, method))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Role, SampleRecord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TWO_CH: [f32; 8] = [1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 0.0, -2.0];

    #[test]
    fn max_and_avg_examples() {
        let t = ActivationTensor::new((2, 2, 2), &TWO_CH).unwrap();
        assert_eq!(pool(&t, &PoolingMethod::MaxPool).unwrap(), vec![4.0, 0.0]);
        assert_eq!(pool(&t, &PoolingMethod::AvgPool).unwrap(), vec![2.5, -0.75]);
    }

    #[test]
    fn mean_std_population() {
        let v = [1.0, 3.0, 5.0, 7.0];
        let t = ActivationTensor::new((1, 2, 2), &v).unwrap();
        let out = pool(&t, &PoolingMethod::MeanStd).unwrap();
        assert_eq!(out[0], 4.0);
        assert!((out[1] as f64 - 5f64.sqrt()).abs() < 1e-6);
        let single = [3.0];
        let t = ActivationTensor::new((1, 1, 1), &single).unwrap();
        assert_eq!(pool(&t, &PoolingMethod::MeanStd).unwrap(), vec![3.0, 0.0]);
    }

    #[test]
    fn empty_and_unfitted() {
        assert!(matches!(ActivationTensor::new((0, 2, 2), &[]), Err(Error::EmptyTensor)));
        let t = ActivationTensor::new((2, 2, 2), &TWO_CH).unwrap();
        assert!(matches!(pool(&t, &PoolingMethod::pca(1)), Err(Error::UnfittedPca)));
    }

    #[test]
    fn pca_identical_samples_project_to_zero() {
        let v = [1.0, 2.0, 3.0, 4.0];
        let ts: Vec<_> = (0..3).map(|_| ActivationTensor::new((1, 2, 2), &v).unwrap()).collect();
        let m = fit_pca(&ts, 1).unwrap();
        assert_eq!(pool(&ts[0], &m).unwrap(), vec![0.0]);
    }

    #[test]
    fn pca_line_has_zero_reconstruction_error() {
        let dir = [0.3f64, -1.0, 2.0, 0.5, 0.0, 1.5];
        let base = [1.0f64, 2.0, -1.0, 0.0, 4.0, 3.0];
        let data: Vec<Vec<f32>> = [-2.0, -0.5, 0.0, 1.0, 3.5]
            .iter()
            .map(|t| base.iter().zip(&dir).map(|(b, d)| (b + t * d) as f32).collect())
            .collect();
        let ts: Vec<_> = data
            .iter()
            .map(|v| ActivationTensor::new((1, 2, 3), v).unwrap())
            .collect();
        let PoolingMethod::Pca { basis: Some(b), .. } = fit_pca(&ts, 1).unwrap() else {
            panic!()
        };
        for v in &data {
            let p = b.project(v)[0] as f64;
            for j in 0..6 {
                let rec = b.mean[j] + p * b.components[0][j];
                assert!((rec - v[j] as f64).abs() < 1e-5);
            }
        }
        // sign convention: largest |entry| is positive (dir[2] = 2.0)
        assert!(b.components[0][2] > 0.0);
    }

    #[test]
    fn pca_too_few_samples() {
        let v = [0.0f32; 4];
        let ts: Vec<_> = (0..5).map(|_| ActivationTensor::new((1, 2, 2), &v).unwrap()).collect();
        assert!(matches!(fit_pca(&ts, 10), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn pca_basis_orthonormal_and_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<Vec<f32>> = (0..12)
            .map(|_| (0..48).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ts: Vec<_> = data
            .iter()
            .map(|v| ActivationTensor::new((3, 4, 4), v).unwrap())
            .collect();
        let m = fit_pca(&ts, 10).unwrap();
        let PoolingMethod::Pca { basis: Some(b), .. } = &m else { panic!() };
        for (i, u) in b.components.iter().enumerate() {
            let n: f64 = u.iter().map(|x| x * x).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-9);
            for v in &b.components[i + 1..] {
                let d: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                assert!(d.abs() <= 1e-5);
            }
        }
        let proj: Vec<Vec<f32>> = ts.iter().map(|t| pool(t, &m).unwrap()).collect();
        for c in 0..10 {
            let mean = proj.iter().map(|p| p[c] as f64).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-5);
        }
    }

    fn tensor_manifest(n: usize, shape: TensorShape, seed: u64) -> (DatasetManifest, FeatureMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = shape.0 * shape.1 * shape.2;
        let vals = (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let samples = (0..n).map(|i| SampleRecord::new(format!("s{i}"), Role::Wild, i)).collect();
        (
            DatasetManifest::for_tensors(samples, shape),
            FeatureMatrix::new(n, d, vals).unwrap(),
        )
    }

    #[test]
    fn batch_shapes() {
        let (man, raw) = tensor_manifest(2, (2, 3, 3), 1);
        let (out, m, _) = pool_batch(&man, &raw, &PoolingMethod::MaxPool).unwrap();
        assert_eq!((m.n_rows(), m.n_cols()), (2, 2));
        assert_eq!(out.feature_dim, Some(2));
        assert_eq!(out.tensor_shape, None);

        let (man, raw) = tensor_manifest(12, (3, 4, 4), 2);
        let (_, m, fitted) = pool_batch(&man, &raw, &PoolingMethod::pca(10)).unwrap();
        assert_eq!((m.n_rows(), m.n_cols()), (12, 10));
        assert!(matches!(fitted, PoolingMethod::Pca { basis: Some(_), .. }));
    }

    #[test]
    fn batch_equals_per_sample() {
        let (man, raw) = tensor_manifest(5, (3, 2, 4), 9);
        for method in [PoolingMethod::MeanStd, PoolingMethod::AvgPool, PoolingMethod::MaxPool] {
            let (_, m, _) = pool_batch(&man, &raw, &method).unwrap();
            for i in 0..5 {
                let t = ActivationTensor::new((3, 2, 4), raw.row(i)).unwrap();
                assert_eq!(m.row(i), pool(&t, &method).unwrap().as_slice());
            }
        }
    }

    #[test]
    fn method_json_tags() {
        let j = serde_json::to_value(PoolingMethod::MaxPool).unwrap();
        assert_eq!(j["method"], "max");
        let back: PoolingMethod = serde_json::from_str(r#"{"method":"pca","n_components":4}"#).unwrap();
        assert_eq!(back, PoolingMethod::pca(4));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tensor() -> impl Strategy<Value = (TensorShape, Vec<f32>)> {
            (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(c, h, w)| {
                (Just((c, h, w)), prop::collection::vec(-100.0f32..100.0, c * h * w))
            })
        }

        proptest! {
            #[test]
            fn max_pool_permutation_invariant((shape, v) in tensor(), seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                let (_, h, w) = shape;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut p = v.clone();
                for ch in p.chunks_mut(h * w) {
                    ch.shuffle(&mut rng);
                }
                let a = pool(&ActivationTensor::new(shape, &v).unwrap(), &PoolingMethod::MaxPool).unwrap();
                let b = pool(&ActivationTensor::new(shape, &p).unwrap(), &PoolingMethod::MaxPool).unwrap();
                prop_assert_eq!(a, b);
            }

            #[test]
            fn pooling_is_homogeneous((shape, v) in tensor(), alpha in -4.0f32..4.0) {
                let scaled: Vec<f32> = v.iter().map(|x| x * alpha).collect();
                let t = ActivationTensor::new(shape, &v).unwrap();
                let ts = ActivationTensor::new(shape, &scaled).unwrap();
                let avg = pool(&t, &PoolingMethod::AvgPool).unwrap();
                let avg_s = pool(&ts, &PoolingMethod::AvgPool).unwrap();
                for (a, b) in avg.iter().zip(&avg_s) {
                    prop_assert!((a * alpha - b).abs() <= 1e-3 * (1.0 + b.abs()));
                }
                if alpha >= 0.0 {
                    let mx = pool(&t, &PoolingMethod::MaxPool).unwrap();
                    let mx_s = pool(&ts, &PoolingMethod::MaxPool).unwrap();
                    for (a, b) in mx.iter().zip(&mx_s) {
                        prop_assert!((a * alpha - b).abs() <= 1e-3 * (1.0 + b.abs()));
                    }
                }
            }

            #[test]
            fn std_is_non_negative((shape, v) in tensor()) {
                let out = pool(&ActivationTensor::new(shape, &v).unwrap(), &PoolingMethod::MeanStd).unwrap();
                prop_assert!(out[shape.0..].iter().all(|&s| s >= 0.0));
            }
        }
    }
}
