//! End-to-end runs: combine ID and WILD features, shuffle, hold out a
//! validation split, cluster the rest into surrogate labels, train the
//! distribution classifier(s) and evaluate on the held-out rows.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{mahalanobis_fit, run_baseline_suite, SuiteEntry, SuiteModels, DEFAULT_EPSILON};
use crate::classifier::{train, ClassifierModel, TrainConfig, TrainedOn};
use crate::clustering::{
    composite_objective, default_k, kmeans_fit, label_clusters, nearest_cluster_score, search_kt,
    ClusterConfig, ClusterModel, EntropyWeighting, ObjectiveBreakdown, SearchBounds, SearchStrategy,
    SurrogateOptions, Trial, DEFAULT_MAX_ITER, DEFAULT_N_INIT, DEFAULT_THRESHOLD, DEFAULT_TOL, DEFAULT_TRIALS,
};
use crate::data::{
    concat, load_dataset, load_logits, write_json, DatasetManifest, FeatureMatrix, Origin, SampleRecord,
};
use crate::error::{Error, Result};
use crate::geo::emit_geojson;
use crate::io::{write_scores, write_stage_labels, write_trials, ScoreRow};
use crate::metrics::{stage_ood_ratio, welch_t_test, EvalReport, WelchTest};
use crate::par;
use crate::pooling::{pool_batch, PoolingMethod};
use crate::synth::SynthData;

pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Surrogate,
    Oracle,
    #[default]
    Both,
}

impl Mode {
    fn wants_surrogate(self) -> bool {
        self != Mode::Oracle
    }

    fn wants_oracle(self) -> bool {
        self != Mode::Surrogate
    }
}

/// Which row count `M` the automatic `k = ceil(0.3 M)` rule uses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KBase {
    /// All rows that are clustered (ID + WILD in the training partition).
    #[default]
    Clustered,
    /// Only WILD rows in the training partition.
    Wild,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedCluster {
    pub k: usize,
    #[serde(default = "default_t")]
    pub t: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_n_init")]
    pub n_init: usize,
}

impl FixedCluster {
    pub fn new(k: usize, t: f64) -> Self {
        FixedCluster {
            k,
            t,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            n_init: DEFAULT_N_INIT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    #[serde(default)]
    pub bounds: Option<SearchBounds>,
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    #[serde(default = "default_strategy")]
    pub strategy: SearchStrategy,
}

fn default_t() -> f64 {
    DEFAULT_THRESHOLD
}
fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}
fn default_tol() -> f64 {
    DEFAULT_TOL
}
fn default_n_init() -> usize {
    DEFAULT_N_INIT
}
fn default_trials() -> usize {
    DEFAULT_TRIALS
}
fn default_strategy() -> SearchStrategy {
    SearchStrategy::Random
}

/// How `(k, t)` are chosen: `"auto"`, `{"k": .., "t": ..}` or `{"search": {..}}`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClusterChoiceRepr", into = "ClusterChoiceRepr")]
pub enum ClusterChoice {
    #[default]
    Auto,
    Fixed(FixedCluster),
    Search(SearchSettings),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ClusterChoiceRepr {
    Keyword(String),
    Search { search: SearchSettings },
    Fixed(FixedCluster),
}

impl TryFrom<ClusterChoiceRepr> for ClusterChoice {
    type Error = String;

    fn try_from(r: ClusterChoiceRepr) -> std::result::Result<Self, String> {
        match r {
            ClusterChoiceRepr::Keyword(k) if k == "auto" => Ok(ClusterChoice::Auto),
            ClusterChoiceRepr::Keyword(k) => Err(format!("unknown cluster setting {k:?}")),
            ClusterChoiceRepr::Search { search } => Ok(ClusterChoice::Search(search)),
            ClusterChoiceRepr::Fixed(f) => Ok(ClusterChoice::Fixed(f)),
        }
    }
}

impl From<ClusterChoice> for ClusterChoiceRepr {
    fn from(c: ClusterChoice) -> Self {
        match c {
            ClusterChoice::Auto => ClusterChoiceRepr::Keyword("auto".into()),
            ClusterChoice::Fixed(f) => ClusterChoiceRepr::Fixed(f),
            ClusterChoice::Search(search) => ClusterChoiceRepr::Search { search },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub id_manifest: PathBuf,
    pub wild_manifest: PathBuf,
    /// Applied when the manifests hold raw tensors (default: max pooling).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooling: Option<PoolingMethod>,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub cluster: ClusterChoice,
    #[serde(default)]
    pub k_base: KBase,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub surrogate: SurrogateOptions,
    #[serde(default)]
    pub entropy_weighting: EntropyWeighting,
    #[serde(default = "default_temperature")]
    pub energy_temperature: f64,
}

fn default_validation_fraction() -> f64 {
    DEFAULT_VALIDATION_FRACTION
}
fn default_runs() -> usize {
    1
}
fn default_temperature() -> f64 {
    1.0
}

impl PipelineConfig {
    pub fn new(id_manifest: impl Into<PathBuf>, wild_manifest: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            id_manifest: id_manifest.into(),
            wild_manifest: wild_manifest.into(),
            pooling: None,
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
            cluster: ClusterChoice::Auto,
            k_base: KBase::Clustered,
            train: TrainConfig::default(),
            seed: 0,
            mode: Mode::Both,
            n_runs: 1,
            output_dir: None,
            surrogate: SurrogateOptions::default(),
            entropy_weighting: EntropyWeighting::Size,
            energy_temperature: 1.0,
        }
    }

    /// Read a JSON config; relative paths resolve against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.id_manifest);
        fix(&mut cfg.wild_manifest);
        if let Some(o) = cfg.output_dir.as_mut() {
            fix(o);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.n_runs == 0 {
            return Err(Error::Config("n_runs must be at least 1".into()));
        }
        if let ClusterChoice::Fixed(f) = self.cluster {
            if f.k < 2 || !(f.t > 0.0 && f.t < 1.0) {
                return Err(Error::Config(format!("invalid fixed cluster setting k={} t={}", f.k, f.t)));
            }
        }
        Ok(())
    }
}

/// ID rows followed by WILD rows, with per-row metadata.
#[derive(Debug, Clone)]
pub struct PipelineData {
    pub features: FeatureMatrix,
    pub origin: Vec<Origin>,
    pub records: Vec<SampleRecord>,
    pub logits: Option<FeatureMatrix>,
}

pub struct LoadedSet {
    pub manifest: DatasetManifest,
    pub features: FeatureMatrix,
    pub logits: Option<FeatureMatrix>,
}

impl PipelineData {
    pub fn from_sets(id: LoadedSet, wild: LoadedSet) -> Result<Self> {
        let (features, origin) = concat(&id.features, &wild.features)?;
        let logits = match (&id.logits, &wild.logits) {
            (Some(a), Some(b)) if a.n_cols() == b.n_cols() => Some(concat(a, b)?.0),
            _ => None,
        };
        let records: Vec<SampleRecord> = id
            .manifest
            .samples
            .into_iter()
            .chain(wild.manifest.samples)
            .collect();
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = records.iter().find(|r| !seen.insert(r.sample_id.as_str())) {
            return Err(Error::MalformedManifest(format!(
                "sample_id {:?} appears in both ID and WILD sets",
                dup.sample_id
            )));
        }
        Ok(PipelineData {
            features,
            origin,
            records,
            logits,
        })
    }

    pub fn from_synth(data: &SynthData) -> Self {
        let set = |s: &crate::synth::SynthSet| LoadedSet {
            manifest: s.manifest.clone(),
            features: s.features.clone(),
            logits: Some(s.logits.clone()),
        };
        Self::from_sets(set(&data.id), set(&data.wild)).expect("synthetic sets are consistent")
    }

    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let pooling = cfg.pooling.clone().unwrap_or(PoolingMethod::MaxPool);
        let (id, fitted) = load_set(&cfg.id_manifest, &pooling)?;
        let (wild, _) = load_set(&cfg.wild_manifest, &fitted)?;
        Self::from_sets(id, wild)
    }

    pub fn n_rows(&self) -> usize {
        self.features.n_rows()
    }

    /// Ground truth for every row, or `None` if any WILD row is unlabeled.
    pub fn truth(&self) -> Option<Vec<u8>> {
        self.records
            .iter()
            .zip(&self.origin)
            .map(|(r, &o)| match o {
                Origin::Id => Some(0),
                Origin::Wild => r.role.truth(),
            })
            .collect()
    }
}

/// Load one manifest, pooling raw tensors. Returns the pooling method actually
/// used (a fitted PCA basis is reused for the next set).
fn load_set(path: &Path, pooling: &PoolingMethod) -> Result<(LoadedSet, PoolingMethod)> {
    let (manifest, matrix) = load_dataset(path)?;
    let logits = load_logits(&manifest, path)?;
    if manifest.tensor_shape.is_some() {
        let (manifest, features, fitted) = pool_batch(&manifest, &matrix, pooling)?;
        Ok((LoadedSet { manifest, features, logits }, fitted))
    } else {
        Ok((
            LoadedSet {
                manifest,
                features: matrix,
                logits,
            },
            pooling.clone(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalLabels {
    Oracle,
    Surrogate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub n_train: usize,
    pub n_validation: usize,
    pub k: usize,
    pub t: f64,
    pub objective: ObjectiveBreakdown,
    /// Which labels the validation metrics are computed against.
    pub labels: EvalLabels,
    pub g_star: Option<EvalReport>,
    pub g_oracle: Option<EvalReport>,
    pub cluster_only: Option<EvalReport>,
    /// g* scored against the surrogate labels of the validation rows, when
    /// the main metrics use ground truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_star_vs_surrogate: Option<EvalReport>,
    /// Fraction of clustered WILD rows whose surrogate label equals the truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate_wild_agreement: Option<f64>,
    pub stage_ood_ratios: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: PipelineReport,
    pub cluster_config: ClusterConfig,
    pub cluster_model: ClusterModel,
    pub g_star: Option<ClassifierModel>,
    pub g_oracle: Option<ClassifierModel>,
    pub trials: Option<Vec<Trial>>,
    /// One row per input sample, in input order, scored by g* (g_oracle in
    /// oracle-only mode).
    pub scores: Vec<ScoreRow>,
    pub stage_labels: Vec<(&'static str, Vec<(String, u8)>)>,
    pub train_rows: Vec<usize>,
    pub validation_rows: Vec<usize>,
    /// Truth-or-surrogate labels of the validation rows used for metrics.
    pub validation_labels: Vec<u8>,
}

/// Seeded shuffle, then the first `round(fraction · n)` rows become validation.
pub fn split_rows(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((validation_fraction * n as f64).round() as usize).min(n);
    let train = perm.split_off(n_val);
    (train, perm)
}

fn pick<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

fn resolve_cluster(
    cfg: &PipelineConfig,
    x: &FeatureMatrix,
    origin: &[Origin],
    seed: u64,
) -> Result<(ClusterConfig, Option<Vec<Trial>>)> {
    let n = x.n_rows();
    match cfg.cluster {
        ClusterChoice::Auto => {
            let m = match cfg.k_base {
                KBase::Clustered => n,
                KBase::Wild => origin.iter().filter(|&&o| o == Origin::Wild).count(),
            };
            let k = default_k(m).max(2).min(n);
            Ok((ClusterConfig::new(k, DEFAULT_THRESHOLD, seed), None))
        }
        ClusterChoice::Fixed(f) => Ok((
            ClusterConfig {
                k: f.k,
                t: f.t,
                seed,
                max_iter: f.max_iter,
                tol: f.tol,
                n_init: f.n_init,
            },
            None,
        )),
        ClusterChoice::Search(s) => {
            let mut bounds = s.bounds.unwrap_or_else(|| SearchBounds::default_for(n));
            bounds.k_max = bounds.k_max.min(n);
            let base = ClusterConfig::new(2, DEFAULT_THRESHOLD, seed);
            let r = search_kt(x, origin, &bounds, s.n_trials, s.strategy, &base, cfg.entropy_weighting)?;
            Ok((r.best, Some(r.trials)))
        }
    }
}

/// One full run on in-memory data.
pub fn run_on_data(data: &PipelineData, cfg: &PipelineConfig, seed: u64) -> Result<RunOutcome> {
    cfg.validate()?;
    let truth = data.truth();
    if cfg.mode.wants_oracle() && truth.is_none() {
        return Err(Error::Config(
            "oracle mode needs LABELED_ID / LABELED_OOD roles on every WILD sample".into(),
        ));
    }
    let (train_rows, val_rows) = split_rows(data.n_rows(), cfg.validation_fraction, seed);
    if train_rows.is_empty() || val_rows.is_empty() {
        return Err(Error::TooFewSamples {
            needed: 2,
            available: data.n_rows(),
        });
    }
    let x_train = data.features.select_rows(&train_rows);
    let x_val = data.features.select_rows(&val_rows);
    let origin_train = pick(&data.origin, &train_rows);

    // clustering + surrogate labels
    let (cluster_cfg, trials) =
        resolve_cluster(cfg, &x_train, &origin_train, seed).map_err(|e| e.in_stage("cluster"))?;
    cluster_cfg.validate(x_train.n_rows()).map_err(|e| e.in_stage("cluster"))?;
    let mut fit = kmeans_fit(&x_train, &cluster_cfg).map_err(|e| e.in_stage("cluster"))?;
    let surrogate_train = label_clusters(
        &mut fit.model,
        &fit.assignments,
        &origin_train,
        cluster_cfg.t,
        cfg.surrogate,
    )?;
    let objective = composite_objective(
        cluster_cfg.k,
        &fit.assignments,
        &origin_train,
        cluster_cfg.t,
        cfg.entropy_weighting,
    )
    .map_err(|e| e.in_stage("objective"))?;
    let cluster_model = fit.model;

    let train_cfg = TrainConfig { seed, ..cfg.train };
    let g_star = if cfg.mode.wants_surrogate() {
        Some(
            train(&x_train, &surrogate_train, &train_cfg, TrainedOn::Surrogate)
                .map_err(|e| e.in_stage("train g*"))?
                .0,
        )
    } else {
        None
    };
    let truth_train = truth.as_ref().map(|t| pick(t, &train_rows));
    let g_oracle = match (&truth_train, cfg.mode.wants_oracle()) {
        (Some(t), true) => Some(
            train(&x_train, t, &train_cfg, TrainedOn::Oracle)
                .map_err(|e| e.in_stage("train g_oracle"))?
                .0,
        ),
        _ => None,
    };

    // evaluation on the held-out rows
    let surrogate_val = cluster_model.predict_labels(&x_val)?;
    let (labels, val_labels) = match &truth {
        Some(t) => (EvalLabels::Oracle, pick(t, &val_rows)),
        None => (EvalLabels::Surrogate, surrogate_val.clone()),
    };
    let evaluate = |g: &ClassifierModel| -> Result<(EvalReport, Vec<f64>)> {
        let s = g.predict_batch(&x_val)?;
        Ok((EvalReport::evaluate(&s, &val_labels, g.threshold)?, s))
    };
    let g_star_eval = g_star
        .as_ref()
        .map(evaluate)
        .transpose()
        .map_err(|e| e.in_stage("evaluate g*"))?;
    let g_oracle_eval = g_oracle
        .as_ref()
        .map(evaluate)
        .transpose()
        .map_err(|e| e.in_stage("evaluate g_oracle"))?;
    let cluster_scores: Vec<f64> = (0..x_val.n_rows())
        .map(|i| nearest_cluster_score(&cluster_model, x_val.row(i)).map(|r| r.1))
        .collect::<Result<_>>()?;
    let cluster_only = EvalReport::evaluate(&cluster_scores, &val_labels, 0.5).ok();
    let g_star_vs_surrogate = match (&g_star_eval, labels) {
        (Some((_, s)), EvalLabels::Oracle) => EvalReport::evaluate(s, &surrogate_val, 0.5).ok(),
        _ => None,
    };
    let surrogate_wild_agreement = truth_train.as_ref().and_then(|t| {
        let wild: Vec<usize> = (0..t.len()).filter(|&i| origin_train[i] == Origin::Wild).collect();
        (!wild.is_empty()).then(|| {
            wild.iter().filter(|&&i| surrogate_train[i] == t[i]).count() as f64 / wild.len() as f64
        })
    });

    let primary = g_star.as_ref().or(g_oracle.as_ref()).expect("mode trains at least one model");
    let primary_val = g_star_eval
        .as_ref()
        .or(g_oracle_eval.as_ref())
        .map(|(_, s)| s)
        .expect("evaluated");
    let classifier_val: Vec<u8> = primary_val.iter().map(|&p| primary.label_for(p)).collect();

    let ids = |rows: &[usize], labels: &[u8]| -> Vec<(String, u8)> {
        rows.iter()
            .zip(labels)
            .map(|(&r, &l)| (data.records[r].sample_id.clone(), l))
            .collect()
    };
    let mut stage_labels = vec![
        ("clustering", ids(&train_rows, &surrogate_train)),
        ("classifier", ids(&val_rows, &classifier_val)),
    ];
    if let (Some(tt), Some(t)) = (&truth_train, &truth) {
        stage_labels.push(("clustering_truth", ids(&train_rows, tt)));
        stage_labels.push(("validation_truth", ids(&val_rows, &pick(t, &val_rows))));
    }
    let stage_slices: Vec<(&str, Vec<u8>)> = stage_labels
        .iter()
        .map(|(n, rows)| (*n, rows.iter().map(|r| r.1).collect()))
        .collect();
    let stage_refs: Vec<(&str, &[u8])> = stage_slices.iter().map(|(n, v)| (*n, v.as_slice())).collect();
    let stage_ood_ratios = stage_ood_ratio(&stage_refs)?;

    let all_scores = primary.predict_batch(&data.features)?;
    let scores = data
        .records
        .iter()
        .zip(&all_scores)
        .map(|(r, &p)| ScoreRow {
            sample_id: r.sample_id.clone(),
            score: p,
            label: Some(primary.label_for(p)),
        })
        .collect();

    let report = PipelineReport {
        seed,
        n_train: train_rows.len(),
        n_validation: val_rows.len(),
        k: cluster_cfg.k,
        t: cluster_cfg.t,
        objective,
        labels,
        g_star: g_star_eval.map(|(r, _)| r),
        g_oracle: g_oracle_eval.map(|(r, _)| r),
        cluster_only,
        g_star_vs_surrogate,
        surrogate_wild_agreement,
        stage_ood_ratios,
    };
    Ok(RunOutcome {
        report,
        cluster_config: cluster_cfg,
        cluster_model,
        g_star,
        g_oracle,
        trials,
        scores,
        stage_labels,
        train_rows,
        validation_rows: val_rows,
        validation_labels: val_labels,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub report: PathBuf,
    pub scores: PathBuf,
    pub cluster_model: PathBuf,
    pub stage_labels: PathBuf,
    pub g_star: Option<PathBuf>,
    pub g_oracle: Option<PathBuf>,
    pub trials: Option<PathBuf>,
    pub geojson: Option<PathBuf>,
    pub repeat_report: Option<PathBuf>,
}

/// Write every artifact of a run into `dir`.
pub fn write_run(dir: &Path, data: &PipelineData, outcome: &RunOutcome) -> Result<RunArtifacts> {
    let mut a = RunArtifacts {
        report: dir.join("report.json"),
        scores: dir.join("scores.csv"),
        cluster_model: dir.join("cluster_model.json"),
        stage_labels: dir.join("stage_labels.csv"),
        ..Default::default()
    };
    write_json(&a.report, &outcome.report)?;
    write_scores(&a.scores, &outcome.scores)?;
    write_json(&a.cluster_model, &outcome.cluster_model)?;
    let stages: Vec<(&str, Vec<(String, u8)>)> =
        outcome.stage_labels.iter().map(|(n, v)| (*n, v.clone())).collect();
    write_stage_labels(&a.stage_labels, &stages)?;
    if let Some(g) = &outcome.g_star {
        let p = dir.join("g.json");
        write_json(&p, g)?;
        a.g_star = Some(p);
    }
    if let Some(g) = &outcome.g_oracle {
        let p = dir.join("g_oracle.json");
        write_json(&p, g)?;
        a.g_oracle = Some(p);
    }
    if let Some(t) = &outcome.trials {
        let p = dir.join("trials.csv");
        write_trials(&p, t)?;
        a.trials = Some(p);
    }
    if data.records.iter().all(|r| r.lat.is_some() && r.lon.is_some()) {
        let threshold = outcome
            .g_star
            .as_ref()
            .or(outcome.g_oracle.as_ref())
            .map_or(0.5, |g| g.threshold);
        let geo = emit_geojson(&outcome.scores, &data.records, threshold)?;
        let p = dir.join("map.geojson");
        write_json(&p, &geo)?;
        a.geojson = Some(p);
    }
    Ok(a)
}

/// Load, run and write artifacts. With `n_runs > 1` a `runs.json` holding
/// the aggregated repeat report is written as well.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let out = cfg
        .output_dir
        .clone()
        .ok_or_else(|| Error::Config("output_dir is required".into()))?;
    let data = PipelineData::load(cfg)?;
    let outcome = run_on_data(&data, cfg, cfg.seed)?;
    let mut artifacts = write_run(&out, &data, &outcome)?;
    if cfg.n_runs > 1 {
        let rep = repeat_runs(&data, cfg, cfg.n_runs, cfg.seed)?;
        let p = out.join("runs.json");
        write_json(&p, &rep)?;
        artifacts.repeat_report = Some(p);
    }
    Ok(artifacts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatReport {
    pub n_runs: usize,
    pub base_seed: u64,
    pub runs: Vec<PipelineReport>,
    pub g_star: Option<EvalReport>,
    pub g_oracle: Option<EvalReport>,
    pub cluster_only: Option<EvalReport>,
    /// Welch test of g_oracle AUROC against g* AUROC across runs.
    pub significance: Option<WelchTest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub significance_error: Option<String>,
}

/// Run with seeds `base_seed + i` and aggregate.
pub fn repeat_runs(data: &PipelineData, cfg: &PipelineConfig, n_runs: usize, base_seed: u64) -> Result<RepeatReport> {
    if n_runs == 0 {
        return Err(Error::TooFewRuns {
            needed: 1,
            available: 0,
        });
    }
    let runs: Vec<PipelineReport> = par::map_range(n_runs, |i| {
        run_on_data(data, cfg, base_seed + i as u64).map(|o| o.report)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let collect = |f: fn(&PipelineReport) -> Option<&EvalReport>| -> Option<EvalReport> {
        let v: Option<Vec<EvalReport>> = runs.iter().map(|r| f(r).cloned()).collect();
        v.and_then(EvalReport::aggregate)
    };
    let g_star = collect(|r| r.g_star.as_ref());
    let g_oracle = collect(|r| r.g_oracle.as_ref());
    let cluster_only = collect(|r| r.cluster_only.as_ref());
    let (significance, significance_error) = if n_runs < 2 {
        (None, None)
    } else {
        match (&g_oracle, &g_star) {
            (Some(o), Some(s)) => {
                let a: Vec<f64> = o.runs.as_ref().map(|r| r.per_run.iter().map(|x| x.auroc).collect()).unwrap_or_default();
                let b: Vec<f64> = s.runs.as_ref().map(|r| r.per_run.iter().map(|x| x.auroc).collect()).unwrap_or_default();
                match welch_t_test(&a, &b) {
                    Ok(t) => (Some(t), None),
                    Err(e) => (None, Some(e.to_string())),
                }
            }
            _ => (None, None),
        }
    };
    Ok(RepeatReport {
        n_runs,
        base_seed,
        runs,
        g_star,
        g_oracle,
        cluster_only,
        significance,
        significance_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    /// `k / n_train`.
    pub ratio: f64,
    pub g_star: Option<EvalReport>,
    pub g_oracle: Option<EvalReport>,
    pub cluster_only: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One run per `k` (same seed and split). Failures are recorded per point.
pub fn k_sweep(data: &PipelineData, cfg: &PipelineConfig, ks: &[usize]) -> Result<Vec<SweepPoint>> {
    cfg.validate()?;
    let t = match cfg.cluster {
        ClusterChoice::Fixed(f) => f.t,
        _ => DEFAULT_THRESHOLD,
    };
    let n_train = split_rows(data.n_rows(), cfg.validation_fraction, cfg.seed).0.len();
    Ok(par::map_slice(ks, |&k| {
        let point_cfg = PipelineConfig {
            cluster: ClusterChoice::Fixed(FixedCluster::new(k, t)),
            ..cfg.clone()
        };
        let ratio = k as f64 / n_train as f64;
        match run_on_data(data, &point_cfg, cfg.seed) {
            Ok(o) => SweepPoint {
                k,
                ratio,
                g_star: o.report.g_star,
                g_oracle: o.report.g_oracle,
                cluster_only: o.report.cluster_only,
                error: None,
            },
            Err(e) => SweepPoint {
                k,
                ratio,
                g_star: None,
                g_oracle: None,
                cluster_only: None,
                error: Some(e.to_string()),
            },
        }
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub labels: EvalLabels,
    pub n_validation: usize,
    pub methods: Vec<SuiteEntry>,
}

/// Run the pipeline once, then score every baseline on the same validation
/// rows. Mahalanobis is fitted on the ID rows of the training partition.
pub fn suite_on_data(data: &PipelineData, cfg: &PipelineConfig, seed: u64) -> Result<SuiteReport> {
    let outcome = run_on_data(data, cfg, seed)?;
    let id_train: Vec<usize> = outcome
        .train_rows
        .iter()
        .copied()
        .filter(|&r| data.origin[r] == Origin::Id)
        .collect();
    let x_id = data.features.select_rows(&id_train);
    let classes: Option<Vec<String>> = id_train
        .iter()
        .map(|&r| data.records[r].class_label.clone())
        .collect();
    let maha = mahalanobis_fit(&x_id, classes.as_deref(), DEFAULT_EPSILON)
        .or_else(|_| mahalanobis_fit(&x_id, None, DEFAULT_EPSILON))
        .ok();
    let x_val = data.features.select_rows(&outcome.validation_rows);
    let logits_val = data.logits.as_ref().map(|l| l.select_rows(&outcome.validation_rows));
    let models = SuiteModels {
        classifier: outcome.g_star.as_ref().or(outcome.g_oracle.as_ref()),
        cluster: Some(&outcome.cluster_model),
        mahalanobis: maha.as_ref(),
        energy_temperature: cfg.energy_temperature,
    };
    let methods = run_baseline_suite(&x_val, &outcome.validation_labels, logits_val.as_ref(), &models)?;
    Ok(SuiteReport {
        labels: outcome.report.labels,
        n_validation: outcome.validation_rows.len(),
        methods,
    })
}
