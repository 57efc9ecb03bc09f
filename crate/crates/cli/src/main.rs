use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tardis_core::baselines::{mahalanobis_fit, score_rows, Method, SuiteModels, DEFAULT_EPSILON};
use tardis_core::classifier::{train, ClassifierModel, TrainConfig, TrainedOn};
use tardis_core::clustering::{
    composite_objective, default_k, kmeans_fit, label_clusters, search_kt, ClusterConfig, ClusterModel,
    EntropyWeighting, SearchBounds, SearchStrategy, SurrogateOptions, DEFAULT_THRESHOLD,
};
use tardis_core::data::{
    concat, export_csv, import_csv, load_dataset, load_logits, read_json, write_dataset, write_json,
    DatasetManifest, FeatureMatrix, Role, SampleRecord,
};
use tardis_core::geo::emit_geojson;
use tardis_core::io::{read_labels, read_scores, write_labels, write_raw_scores, write_scores, write_trials, ScoreRow};
use tardis_core::metrics::EvalReport;
use tardis_core::pipeline::{
    k_sweep, run_pipeline, suite_on_data, split_rows, PipelineConfig, PipelineData,
};
use tardis_core::pooling::{pool_batch, PoolingMethod, DEFAULT_PCA_COMPONENTS};
use tardis_core::synth::{synth_generate, write_synth, SynthSpec};
use tardis_core::throughput::throughput_bench;
use tardis_core::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "tardis", version, about = "Post-hoc OOD detection from exported activations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pool raw C×H×W activation tensors into feature vectors.
    Pool(PoolArgs),
    /// Convert a `sample_id[,lat,lon],f0..` CSV into a manifest + payload.
    ImportCsv(ImportArgs),
    /// Write a manifest's features back out as CSV.
    ExportCsv(ExportArgs),
    /// Cluster ID + WILD features and assign surrogate labels.
    Cluster(ClusterArgs),
    /// Train the distribution classifier.
    TrainG(TrainArgs),
    /// Score a manifest with a trained classifier.
    Predict(PredictArgs),
    /// Compute AUROC / FPR95 / accuracy from scores and labels.
    Eval(EvalArgs),
    /// Score a manifest with one baseline detector.
    Baseline(BaselineArgs),
    /// Run the pipeline once and score every method on its validation split.
    Suite(SuiteArgs),
    /// Run the full pipeline from a JSON config.
    Run(RunArgs),
    /// Re-run the pipeline for several cluster counts.
    SweepK(SweepArgs),
    /// Generate a synthetic ID/WILD benchmark.
    Synth(SynthArgs),
    /// Write a GeoJSON map of per-sample scores.
    Geojson(GeoArgs),
    /// Measure per-sample prediction latency.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolKind {
    Meanstd,
    Avg,
    Max,
    Pca,
}

#[derive(Args)]
struct PoolArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, required_unless_present = "method_file")]
    method: Option<PoolKind>,
    #[arg(long, default_value_t = DEFAULT_PCA_COMPONENTS)]
    pca_components: usize,
    /// Reuse a fitted pooling method (e.g. the PCA basis written by an earlier run).
    #[arg(long, conflicts_with = "method")]
    method_file: Option<PathBuf>,
    /// Output directory, or a path ending in `manifest.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Id,
    Wild,
    LabeledId,
    LabeledOod,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Role {
        match r {
            RoleArg::Id => Role::Id,
            RoleArg::Wild => Role::Wild,
            RoleArg::LabeledId => Role::LabeledId,
            RoleArg::LabeledOod => Role::LabeledOod,
        }
    }
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long, value_enum)]
    role: RoleArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    id: PathBuf,
    #[arg(long)]
    wild: PathBuf,
    #[arg(long, conflicts_with_all = ["auto", "search"])]
    k: Option<usize>,
    /// k = ceil(0.3 · rows clustered) (the default when neither --k nor --search is given).
    #[arg(long)]
    auto: bool,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    t: f64,
    /// Search (k, t) with this many trials.
    #[arg(long, conflicts_with = "auto")]
    search: Option<usize>,
    #[arg(long, value_enum, default_value = "random")]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Average cluster entropy without size weighting.
    #[arg(long)]
    uniform_entropy: bool,
    /// Keep known-ID rows at label 0 whatever their cluster.
    #[arg(long)]
    pin_known_id: bool,
    #[arg(long)]
    out: PathBuf,
    /// Per-row surrogate labels as `sample_id,label`.
    #[arg(long)]
    labels_out: Option<PathBuf>,
    #[arg(long)]
    trials_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Random,
    Grid,
}

#[derive(Args)]
struct TrainArgs {
    /// One or more manifests; rows are concatenated in order.
    #[arg(long, required = true, num_args = 1..)]
    features: Vec<PathBuf>,
    /// A `sample_id,label` CSV, or a cluster model JSON whose nearest-cluster
    /// labels are used. Omit with --oracle to take truth from LABELED_* roles.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    g: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Msp,
    Energy,
    Mahalanobis,
    ClusterOnly,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    method: BaselineArg,
    #[arg(long = "in")]
    input: PathBuf,
    /// Raw little-endian f32 logits, one record per sample in manifest order.
    #[arg(long)]
    logits: Option<PathBuf>,
    #[arg(long)]
    logit_dim: Option<usize>,
    /// ID manifest to fit Mahalanobis class means and covariance on.
    #[arg(long)]
    fit: Option<PathBuf>,
    /// Cluster model JSON for cluster-only scoring.
    #[arg(long)]
    cluster: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SuiteArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Explicit cluster counts.
    #[arg(long, value_delimiter = ',', conflicts_with = "ratios")]
    ks: Vec<usize>,
    /// Cluster counts as fractions of the training partition.
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2,0.3,0.4")]
    ratios: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    n_id: usize,
    #[arg(long, default_value_t = 500)]
    n_wild: usize,
    #[arg(long, default_value_t = 0.5)]
    ood_fraction: f64,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// OOD mean displacement in units of σ.
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    #[arg(long, default_value_t = 3)]
    components: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GeoArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Manifests holding the samples' lat/lon.
    #[arg(long, required = true, num_args = 1..)]
    manifest: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Trained classifier; a zero model of --dim features is used otherwise.
    #[arg(long)]
    g: Option<PathBuf>,
    #[arg(long, default_value_t = 1280)]
    dim: usize,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()).map(Error::kind) {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Data) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pool(a) => cmd_pool(a),
        Command::ImportCsv(a) => {
            let (m, x) = import_csv(&a.csv, a.role.into(), &a.out)?;
            println!("imported {} samples, {} features -> {}", m.len(), x.n_cols(), a.out.display());
            Ok(())
        }
        Command::ExportCsv(a) => {
            let (m, x) = load_dataset(&a.input)?;
            export_csv(&a.out, &m, &x)?;
            Ok(())
        }
        Command::Cluster(a) => cmd_cluster(a),
        Command::TrainG(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Suite(a) => {
            let cfg = PipelineConfig::load(&a.config)?;
            let data = PipelineData::load(&cfg)?;
            let report = suite_on_data(&data, &cfg, cfg.seed)?;
            write_json(&a.out, &report)?;
            for m in &report.methods {
                match &m.report {
                    Some(r) => println!("{:<13} auroc {:.4}  fpr95 {:.4}", m.method.name(), r.auroc, r.fpr95),
                    None => println!(
                        "{:<13} unavailable: {}",
                        m.method.name(),
                        m.unavailable.as_deref().unwrap_or("")
                    ),
                }
            }
            Ok(())
        }
        Command::Run(a) => cmd_run(a),
        Command::SweepK(a) => cmd_sweep(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Geojson(a) => cmd_geojson(a),
        Command::Bench(a) => {
            let model = match &a.g {
                Some(p) => read_json::<ClassifierModel>(p)?,
                None => ClassifierModel::zeros(a.dim, TrainedOn::Surrogate),
            };
            let stats = throughput_bench(&model, a.n, a.seed)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
            Ok(())
        }
    }
}

fn out_manifest(out: &Path) -> (PathBuf, Option<PathBuf>) {
    if out.extension().is_some_and(|e| e == "json") {
        let dir = out.parent().unwrap_or(Path::new(".")).to_path_buf();
        (dir, Some(out.to_path_buf()))
    } else {
        (out.to_path_buf(), None)
    }
}

fn cmd_pool(a: PoolArgs) -> Result<()> {
    let (manifest, raw) = load_dataset(&a.input)?;
    if manifest.tensor_shape.is_none() {
        return Err(config_err(format!("{} holds pooled features, not tensors", a.input.display())));
    }
    let method = match (&a.method_file, a.method) {
        (Some(p), _) => read_json::<PoolingMethod>(p)?,
        (None, Some(PoolKind::Meanstd)) => PoolingMethod::MeanStd,
        (None, Some(PoolKind::Avg)) => PoolingMethod::AvgPool,
        (None, Some(PoolKind::Max)) => PoolingMethod::MaxPool,
        (None, Some(PoolKind::Pca)) => PoolingMethod::pca(a.pca_components),
        (None, None) => unreachable!("clap requires --method or --method-file"),
    };
    let logits = load_logits(&manifest, &a.input)?;
    let (pooled_manifest, pooled, fitted) = pool_batch(&manifest, &raw, &method)?;
    let (dir, target) = out_manifest(&a.out);
    let mut pooled_manifest = pooled_manifest;
    pooled_manifest.logits_file = None;
    pooled_manifest.logit_dim = None;
    pooled_manifest.samples.iter_mut().for_each(|s| s.logits_row = None);
    let written = write_dataset(&dir, &pooled_manifest, &pooled, logits.as_ref())?;
    if let Some(t) = target.filter(|t| *t != written) {
        std::fs::rename(&written, &t).with_context(|| format!("renaming to {}", t.display()))?;
    }
    write_json(&dir.join("pooling.json"), &fitted)?;
    println!("pooled {} samples to {} features", pooled.n_rows(), pooled.n_cols());
    Ok(())
}

fn load_pair(id: &Path, wild: &Path) -> Result<PipelineData> {
    let cfg = PipelineConfig::new(id, wild);
    Ok(PipelineData::load(&cfg)?)
}

fn cmd_cluster(a: ClusterArgs) -> Result<()> {
    let data = load_pair(&a.id, &a.wild)?;
    let weighting = if a.uniform_entropy {
        EntropyWeighting::Uniform
    } else {
        EntropyWeighting::Size
    };
    let n = data.n_rows();
    let (cfg, trials) = match (a.k, a.search) {
        (Some(k), _) => (ClusterConfig::new(k, a.t, a.seed), None),
        (None, Some(n_trials)) => {
            let strategy = match a.strategy {
                StrategyArg::Random => SearchStrategy::Random,
                StrategyArg::Grid => SearchStrategy::Grid,
            };
            let r = search_kt(
                &data.features,
                &data.origin,
                &SearchBounds::default_for(n),
                n_trials,
                strategy,
                &ClusterConfig::new(2, a.t, a.seed),
                weighting,
            )?;
            (r.best, Some(r.trials))
        }
        (None, None) => (ClusterConfig::new(default_k(n).clamp(2, n.max(2)), a.t, a.seed), None),
    };
    cfg.validate(n)?;
    let mut fit = kmeans_fit(&data.features, &cfg)?;
    let labels = label_clusters(
        &mut fit.model,
        &fit.assignments,
        &data.origin,
        cfg.t,
        SurrogateOptions {
            pin_known_id: a.pin_known_id,
        },
    )?;
    let obj = composite_objective(cfg.k, &fit.assignments, &data.origin, cfg.t, weighting)?;
    write_json(&a.out, &fit.model)?;
    if let Some(p) = &a.labels_out {
        let ids: Vec<String> = data.records.iter().map(|r| r.sample_id.clone()).collect();
        write_labels(p, &ids, &labels)?;
    }
    if let (Some(p), Some(t)) = (&a.trials_out, &trials) {
        write_trials(p, t)?;
    }
    println!(
        "k={} t={} objective {:.4} (H {:.4}, mis-ID {:.4}, corr-ID {:.4}), {} of {} rows OOD",
        cfg.k,
        cfg.t,
        obj.total,
        obj.entropy_h,
        obj.p_mis_id,
        obj.p_corr_id,
        labels.iter().filter(|&&l| l == 1).count(),
        labels.len()
    );
    Ok(())
}

struct Loaded {
    records: Vec<SampleRecord>,
    features: FeatureMatrix,
}

fn load_many(paths: &[PathBuf]) -> Result<Loaded> {
    let mut records = Vec::new();
    let mut features: Option<FeatureMatrix> = None;
    for p in paths {
        let (m, x) = load_dataset(p)?;
        if m.tensor_shape.is_some() {
            return Err(config_err(format!("{} holds raw tensors; run `tardis pool` first", p.display())));
        }
        records.extend(m.samples);
        features = Some(match features {
            None => x,
            Some(acc) => concat(&acc, &x)?.0,
        });
    }
    Ok(Loaded {
        records,
        features: features.ok_or_else(|| config_err("no feature manifests given"))?,
    })
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data = load_many(&a.features)?;
    let labels: Vec<u8> = match &a.labels {
        Some(p) if p.extension().is_some_and(|e| e == "json") => {
            let model: ClusterModel = read_json(p)?;
            model.predict_labels(&data.features)?
        }
        Some(p) => {
            let map = read_labels(p)?;
            data.records
                .iter()
                .map(|r| {
                    map.get(&r.sample_id)
                        .copied()
                        .ok_or_else(|| Error::HeaderMismatch(format!("no label for sample {:?}", r.sample_id)))
                })
                .collect::<std::result::Result<_, _>>()?
        }
        None if a.oracle => data
            .records
            .iter()
            .map(|r| match r.role {
                Role::Id => Some(0),
                other => other.truth(),
            })
            .collect::<Option<Vec<u8>>>()
            .ok_or_else(|| config_err("--oracle without --labels needs LABELED_* roles on every WILD sample"))?,
        None => return Err(config_err("--labels is required unless --oracle is given")),
    };
    let cfg = TrainConfig {
        max_iter: a.max_iter,
        l2_lambda: a.l2,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let trained_on = if a.oracle { TrainedOn::Oracle } else { TrainedOn::Surrogate };
    let (model, trace) = train(&data.features, &labels, &cfg, trained_on)?;
    write_json(&a.out, &model)?;
    println!(
        "trained on {} rows in {} iterations (converged: {}), final loss {:.6}",
        labels.len(),
        trace.iterations,
        trace.converged,
        trace.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let g: ClassifierModel = read_json(&a.g)?;
    let data = load_many(std::slice::from_ref(&a.input))?;
    let probs = g.predict_batch(&data.features)?;
    let rows: Vec<ScoreRow> = data
        .records
        .iter()
        .zip(&probs)
        .map(|(r, &p)| ScoreRow {
            sample_id: r.sample_id.clone(),
            score: p,
            label: Some(g.label_for(p)),
        })
        .collect();
    write_scores(&a.out, &rows)?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let scores = read_scores(&a.scores)?;
    let labels = read_labels(&a.labels)?;
    let mut s = Vec::with_capacity(scores.len());
    let mut l = Vec::with_capacity(scores.len());
    for row in &scores {
        let y = labels
            .get(&row.sample_id)
            .ok_or_else(|| Error::HeaderMismatch(format!("no label for sample {:?}", row.sample_id)))?;
        s.push(row.score);
        l.push(*y);
    }
    let report = EvalReport::evaluate(&s, &l, a.threshold)?;
    match &a.out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn cmd_baseline(a: BaselineArgs) -> Result<()> {
    let (mut manifest, features) = load_dataset(&a.input)?;
    if let Some(path) = &a.logits {
        let dim = a
            .logit_dim
            .or(manifest.logit_dim)
            .ok_or_else(|| config_err("--logit-dim is required when the manifest declares none"))?;
        let abs = std::path::absolute(path).with_context(|| format!("resolving {}", path.display()))?;
        manifest.logit_dim = Some(dim);
        manifest.logits_file = Some(abs.to_string_lossy().into_owned());
        for (i, s) in manifest.samples.iter_mut().enumerate() {
            s.logits_row.get_or_insert(i);
        }
    }
    let logits = load_logits(&manifest, &a.input)?;
    let method = match a.method {
        BaselineArg::Msp => Method::Msp,
        BaselineArg::Energy => Method::Energy,
        BaselineArg::Mahalanobis => Method::Mahalanobis,
        BaselineArg::ClusterOnly => Method::ClusterOnly,
    };
    let maha = match (&a.fit, method) {
        (Some(p), Method::Mahalanobis) => {
            let (m, x) = load_dataset(p)?;
            let classes: Option<Vec<String>> = m.samples.iter().map(|s| s.class_label.clone()).collect();
            Some(mahalanobis_fit(&x, classes.as_deref(), a.epsilon)?)
        }
        (None, Method::Mahalanobis) => return Err(config_err("mahalanobis needs --fit <ID manifest>")),
        _ => None,
    };
    let cluster = match (&a.cluster, method) {
        (Some(p), Method::ClusterOnly) => Some(read_json::<ClusterModel>(p)?),
        (None, Method::ClusterOnly) => return Err(config_err("cluster-only needs --cluster <model.json>")),
        _ => None,
    };
    let models = SuiteModels {
        classifier: None,
        cluster: cluster.as_ref(),
        mahalanobis: maha.as_ref(),
        energy_temperature: a.temperature,
    };
    let scores = score_rows(method, &features, logits.as_ref(), &models)?;
    let ids: Vec<String> = manifest.samples.iter().map(|s| s.sample_id.clone()).collect();
    write_raw_scores(&a.out, "ood_score", &ids, &scores)?;
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load(&a.config)?;
    if let Some(o) = a.out {
        cfg.output_dir = Some(o);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.runs {
        cfg.n_runs = r;
    }
    let art = run_pipeline(&cfg)?;
    let report: serde_json::Value = read_json(&art.report)?;
    for key in ["g_star", "g_oracle", "cluster_only"] {
        if let Some(r) = report.get(key).filter(|v| !v.is_null()) {
            println!("{key:<13} auroc {:.4}  fpr95 {:.4}", r["auroc"].as_f64().unwrap_or(f64::NAN), r["fpr95"].as_f64().unwrap_or(f64::NAN));
        }
    }
    println!("artifacts in {}", art.report.parent().unwrap_or(Path::new(".")).display());
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let cfg = PipelineConfig::load(&a.config)?;
    let data = PipelineData::load(&cfg)?;
    let ks: Vec<usize> = if a.ks.is_empty() {
        let n_train = split_rows(data.n_rows(), cfg.validation_fraction, cfg.seed).0.len();
        let mut ks: Vec<usize> = a
            .ratios
            .iter()
            .map(|r| ((r * n_train as f64).ceil() as usize).max(2))
            .collect();
        ks.dedup();
        ks
    } else {
        a.ks
    };
    let points = k_sweep(&data, &cfg, &ks)?;
    write_json(&a.out, &points)?;
    for p in &points {
        match (&p.g_star, &p.error) {
            (Some(g), _) => println!("k={:<6} ratio {:.3}  g* auroc {:.4}", p.k, p.ratio, g.auroc),
            (None, Some(e)) => println!("k={:<6} ratio {:.3}  failed: {e}", p.k, p.ratio),
            _ => println!("k={:<6} ratio {:.3}", p.k, p.ratio),
        }
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_components: a.components,
        ..SynthSpec::new(a.n_id, a.n_wild, a.ood_fraction, a.dim, a.separation, a.seed)
    };
    let data = synth_generate(&spec)?;
    write_synth(&a.out, &data)?;
    let cfg = PipelineConfig {
        seed: a.seed,
        output_dir: Some("out".into()),
        ..PipelineConfig::new("id/manifest.json", "wild/manifest.json")
    };
    write_json(&a.out.join("config.json"), &cfg)?;
    println!("wrote {} ID and {} WILD samples to {}", a.n_id, a.n_wild, a.out.display());
    Ok(())
}

fn cmd_geojson(a: GeoArgs) -> Result<()> {
    let scores = read_scores(&a.scores)?;
    let mut records = Vec::new();
    for p in &a.manifest {
        let m: DatasetManifest = read_json(p)?;
        records.extend(m.samples);
    }
    let geo = emit_geojson(&scores, &records, a.threshold)?;
    write_json(&a.out, &geo)?;
    Ok(())
}
