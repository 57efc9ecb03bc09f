//! Synthetic ID/WILD benchmark generator.
//!
//! ID features come from a Gaussian mixture with unit-variance components.
//! OOD draws reuse the mixture but shift each component mean by
//! `separation / sqrt(dim)` on every axis, i.e. by `separation` standard
//! deviations in Euclidean distance. WILD truth is recorded under the
//! `LABELED_*` roles. Logits are the per-component Gaussian log-likelihoods
//! `-‖z - μ_c‖² / 2`, so logit baselines have something to score.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{write_dataset, DatasetManifest, FeatureMatrix, Role, SampleRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_id: usize,
    pub n_wild: usize,
    /// Fraction of WILD rows drawn from the shifted law.
    pub ood_fraction: f64,
    pub dim: usize,
    /// Mean displacement of OOD draws, in units of the component σ.
    pub separation: f64,
    pub seed: u64,
    #[serde(default = "default_components")]
    pub n_components: usize,
    /// Standard deviation of the component means around the origin.
    #[serde(default = "default_spread")]
    pub component_spread: f64,
}

fn default_components() -> usize {
    3
}

fn default_spread() -> f64 {
    1.5
}

impl SynthSpec {
    pub fn new(n_id: usize, n_wild: usize, ood_fraction: f64, dim: usize, separation: f64, seed: u64) -> Self {
        SynthSpec {
            n_id,
            n_wild,
            ood_fraction,
            dim,
            separation,
            seed,
            n_components: default_components(),
            component_spread: default_spread(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_id == 0 || self.n_wild == 0 || self.dim == 0 || self.n_components == 0 {
            return Err(Error::InvalidSpec("sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ood_fraction) {
            return Err(Error::InvalidSpec(format!(
                "ood_fraction {} outside [0, 1]",
                self.ood_fraction
            )));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite())
            || !(self.component_spread >= 0.0 && self.component_spread.is_finite())
        {
            return Err(Error::InvalidSpec("separation and spread must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthSet {
    pub manifest: DatasetManifest,
    pub features: FeatureMatrix,
    pub logits: FeatureMatrix,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub id: SynthSet,
    pub wild: SynthSet,
    pub component_means: Vec<Vec<f64>>,
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.dim;
    let means: Vec<Vec<f64>> = (0..spec.n_components)
        .map(|_| {
            (0..dim)
                .map(|_| spec.component_spread * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let shift = spec.separation / (dim as f64).sqrt();

    let draw = |rng: &mut ChaCha8Rng, ood: bool| -> (usize, Vec<f32>) {
        let c = rng.random_range(0..spec.n_components);
        let offset = if ood { shift } else { 0.0 };
        let z = means[c]
            .iter()
            .map(|m| (m + offset + rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        (c, z)
    };

    let n_ood = (spec.ood_fraction * spec.n_wild as f64).round() as usize;
    let make = |rng: &mut ChaCha8Rng, n: usize, prefix: &str, role_of: &dyn Fn(usize) -> Role| {
        let mut samples = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n * dim);
        let mut logits = Vec::with_capacity(n * spec.n_components);
        for i in 0..n {
            let role = role_of(i);
            let (c, z) = draw(rng, role == Role::LabeledOod);
            for m in &means {
                let d2: f64 = z.iter().zip(m).map(|(&a, b)| (a as f64 - b).powi(2)).sum();
                logits.push((-0.5 * d2) as f32);
            }
            let mut rec = SampleRecord::new(format!("{prefix}-{i:05}"), role, i);
            rec.lat = Some(rng.random_range(-60.0..60.0));
            rec.lon = Some(rng.random_range(-180.0..180.0));
            if role == Role::Id {
                rec.class_label = Some(format!("c{c}"));
            }
            rec.logits_row = Some(i);
            samples.push(rec);
            values.extend(z);
        }
        let mut manifest = DatasetManifest::for_features(samples, dim);
        manifest.logit_dim = Some(spec.n_components);
        manifest.logits_file = Some(crate::data::LOGITS_FILE.to_string());
        SynthSet {
            manifest,
            features: FeatureMatrix::new(n, dim, values).expect("sized"),
            logits: FeatureMatrix::new(n, spec.n_components, logits).expect("sized"),
        }
    };

    let id = make(&mut rng, spec.n_id, "id", &|_| Role::Id);
    // OOD rows are spread through the WILD set by a seeded shuffle of roles.
    let mut roles: Vec<Role> = (0..spec.n_wild)
        .map(|i| if i < n_ood { Role::LabeledOod } else { Role::LabeledId })
        .collect();
    rand::seq::SliceRandom::shuffle(roles.as_mut_slice(), &mut rng);
    let wild = make(&mut rng, spec.n_wild, "wild", &|i| roles[i]);
    Ok(SynthData {
        id,
        wild,
        component_means: means,
    })
}

/// Write `id/manifest.json` and `wild/manifest.json` under `dir`.
pub fn write_synth(dir: &Path, data: &SynthData) -> Result<(PathBuf, PathBuf)> {
    let id = write_dataset(&dir.join("id"), &data.id.manifest, &data.id.features, Some(&data.id.logits))?;
    let wild = write_dataset(
        &dir.join("wild"),
        &data.wild.manifest,
        &data.wild.features,
        Some(&data.wild.logits),
    )?;
    Ok((id, wild))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let s = SynthSpec::new(20, 30, 0.5, 4, 3.0, 7);
        let a = synth_generate(&s).unwrap();
        let b = synth_generate(&s).unwrap();
        assert_eq!(a.wild.features, b.wild.features);
        assert_eq!(a.id.manifest, b.id.manifest);
        let c = synth_generate(&SynthSpec { seed: 8, ..s }).unwrap();
        assert_ne!(a.wild.features, c.wild.features);
    }

    #[test]
    fn ood_fraction_zero_is_all_labeled_id() {
        let d = synth_generate(&SynthSpec::new(10, 25, 0.0, 3, 5.0, 1)).unwrap();
        assert!(d.wild.manifest.samples.iter().all(|s| s.role == Role::LabeledId));
        let d = synth_generate(&SynthSpec::new(10, 20, 0.25, 3, 5.0, 1)).unwrap();
        let n = d.wild.manifest.samples.iter().filter(|s| s.role == Role::LabeledOod).count();
        assert_eq!(n, 5);
    }

    #[test]
    fn shift_has_requested_length() {
        let spec = SynthSpec {
            n_components: 1,
            component_spread: 0.0,
            ..SynthSpec::new(4000, 4000, 1.0, 8, 10.0, 3)
        };
        let d = synth_generate(&spec).unwrap();
        let mean = |m: &FeatureMatrix, j: usize| m.rows().map(|r| r[j] as f64).sum::<f64>() / m.n_rows() as f64;
        let dist: f64 = (0..8)
            .map(|j| (mean(&d.wild.features, j) - mean(&d.id.features, j)).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((dist - 10.0).abs() < 0.2, "{dist}");
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(
            synth_generate(&SynthSpec::new(10, 10, 1.5, 3, 1.0, 0)),
            Err(Error::InvalidSpec(_))
        ));
        assert!(matches!(
            synth_generate(&SynthSpec::new(0, 10, 0.5, 3, 1.0, 0)),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn written_sets_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let d = synth_generate(&SynthSpec::new(5, 6, 0.5, 3, 2.0, 0)).unwrap();
        let (id, wild) = write_synth(dir.path(), &d).unwrap();
        let (m, x) = crate::data::load_dataset(&wild).unwrap();
        assert_eq!(x, d.wild.features);
        assert_eq!(crate::data::load_logits(&m, &wild).unwrap().unwrap(), d.wild.logits);
        assert!(crate::data::load_dataset(&id).is_ok());
    }
}
