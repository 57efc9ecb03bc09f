use std::path::Path;

use proptest::prelude::*;

use tardis_core::data::{load_dataset, write_dataset, DatasetManifest, FeatureMatrix, Role, SampleRecord};
use tardis_core::io::{read_scores, read_stage_labels};
use tardis_core::pipeline::{
    run_on_data, run_pipeline, split_rows, ClusterChoice, FixedCluster, Mode, PipelineConfig, PipelineData,
};
use tardis_core::pooling::PoolingMethod;
use tardis_core::synth::{synth_generate, write_synth, SynthSpec};
use tardis_core::ErrorKind;

fn synth(n_id: usize, n_wild: usize, sep: f64, seed: u64) -> PipelineData {
    PipelineData::from_synth(&synth_generate(&SynthSpec::new(n_id, n_wild, 0.5, 4, sep, seed)).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_rows(n in 1usize..500, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let (train, val) = split_rows(n, frac, seed);
        let mut seen = vec![false; n];
        for &i in train.iter().chain(&val) {
            prop_assert!(!seen[i]);
            seen[i] = true;
        }
        prop_assert!(seen.iter().all(|&s| s));
        prop_assert!((val.len() as f64 - frac * n as f64).abs() <= 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn same_seed_same_scores(seed in 0u64..1000, sep in 1.0f64..6.0) {
        let d = synth(40, 60, sep, seed);
        let cfg = PipelineConfig::new("", "");
        let a = run_on_data(&d, &cfg, seed).unwrap();
        let b = run_on_data(&d, &cfg, seed).unwrap();
        prop_assert_eq!(a.scores, b.scores);
        prop_assert_eq!(a.report, b.report);
    }

    #[test]
    fn oracle_metrics_ignore_cluster_config(seed in 0u64..1000, k1 in 2usize..10, k2 in 10usize..40) {
        let d = synth(40, 60, 3.0, seed);
        let cfg = |k: usize, t: f64| PipelineConfig {
            cluster: ClusterChoice::Fixed(FixedCluster::new(k, t)),
            mode: Mode::Oracle,
            ..PipelineConfig::new("", "")
        };
        let a = run_on_data(&d, &cfg(k1, 0.1), seed).unwrap().report.g_oracle;
        let b = run_on_data(&d, &cfg(k2, 0.05), seed).unwrap().report.g_oracle;
        prop_assert_eq!(a, b);
    }
}

#[test]
fn written_stage_labels_match_reported_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_generate(&SynthSpec::new(60, 90, 0.4, 5, 3.0, 2)).unwrap();
    let (id, wild) = write_synth(&dir.path().join("data"), &data).unwrap();
    let cfg = PipelineConfig {
        output_dir: Some(dir.path().join("out")),
        ..PipelineConfig::new(&id, &wild)
    };
    let art = run_pipeline(&cfg).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&art.report).unwrap()).unwrap();
    let rows = read_stage_labels(&art.stage_labels).unwrap();
    let ratios = report["stage_ood_ratios"].as_object().unwrap();
    assert!(!ratios.is_empty());
    for (stage, ratio) in ratios {
        let labels: Vec<u8> = rows.iter().filter(|r| &r.1 == stage).map(|r| r.2).collect();
        let recount = labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len() as f64;
        assert_eq!(ratio.as_f64().unwrap(), recount, "{stage}");
    }
    assert_eq!(read_scores(&art.scores).unwrap().len(), 150);
    assert!(art.geojson.is_some());
    assert!(art.g_star.is_some() && art.g_oracle.is_some());
}

#[test]
fn g_star_not_worse_than_cluster_only_on_overlap() {
    let mut gap = 0.0;
    for seed in 0..5 {
        let r = run_on_data(&synth(200, 200, 3.0, seed), &PipelineConfig::new("", ""), seed)
            .unwrap()
            .report;
        gap += r.g_star.unwrap().auroc - r.cluster_only.unwrap().auroc;
    }
    assert!(gap >= 0.0, "{gap}");
}

#[test]
fn repeat_runs_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_generate(&SynthSpec::new(50, 50, 0.5, 3, 4.0, 5)).unwrap();
    let (id, wild) = write_synth(&dir.path().join("data"), &data).unwrap();
    let cfg = PipelineConfig {
        n_runs: 3,
        output_dir: Some(dir.path().join("out")),
        ..PipelineConfig::new(&id, &wild)
    };
    let art = run_pipeline(&cfg).unwrap();
    let runs: serde_json::Value = serde_json::from_slice(&std::fs::read(art.repeat_report.unwrap()).unwrap()).unwrap();
    assert_eq!(runs["runs"].as_array().unwrap().len(), 3);
    assert!(runs["g_star"]["runs"]["auroc"]["mean"].is_number());
}

fn tensor_set(dir: &Path, prefix: &str, role: Role, n: usize, offset: f32) -> std::path::PathBuf {
    let shape = (3, 2, 2);
    let len = 12;
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|i| (0..len).map(|j| offset + ((i * 7 + j * 3) % 11) as f32 * 0.1).collect())
        .collect();
    let samples = (0..n).map(|i| SampleRecord::new(format!("{prefix}{i}"), role, i)).collect();
    let m = DatasetManifest::for_tensors(samples, shape);
    write_dataset(dir, &m, &FeatureMatrix::from_rows(len, &rows).unwrap(), None).unwrap()
}

#[test]
fn raw_tensors_are_pooled_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let id = tensor_set(&dir.path().join("id"), "i", Role::Id, 30, 0.0);
    let wild = tensor_set(&dir.path().join("wild"), "w", Role::Wild, 30, 5.0);
    for (pooling, dim) in [(PoolingMethod::MaxPool, 3), (PoolingMethod::MeanStd, 6), (PoolingMethod::pca(2), 2)] {
        let cfg = PipelineConfig {
            pooling: Some(pooling),
            mode: Mode::Surrogate,
            ..PipelineConfig::new(&id, &wild)
        };
        let data = PipelineData::load(&cfg).unwrap();
        assert_eq!(data.features.n_cols(), dim);
        assert_eq!(data.n_rows(), 60);
        assert!(data.truth().is_none());
    }
}

#[test]
fn oracle_mode_without_truth_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let id = tensor_set(&dir.path().join("id"), "i", Role::Id, 20, 0.0);
    let wild = tensor_set(&dir.path().join("wild"), "w", Role::Wild, 20, 5.0);
    let cfg = PipelineConfig {
        mode: Mode::Oracle,
        output_dir: Some(dir.path().join("out")),
        ..PipelineConfig::new(&id, &wild)
    };
    assert_eq!(run_pipeline(&cfg).unwrap_err().kind(), ErrorKind::Config);
}

#[test]
fn duplicate_ids_across_sets_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let id = tensor_set(&dir.path().join("id"), "x", Role::Id, 5, 0.0);
    let wild = tensor_set(&dir.path().join("wild"), "x", Role::Wild, 5, 1.0);
    let err = PipelineData::load(&PipelineConfig::new(&id, &wild)).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Data);
    assert!(load_dataset(&id).is_ok());
}

#[test]
fn config_file_paths_resolve_relative_to_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_generate(&SynthSpec::new(30, 30, 0.5, 3, 4.0, 1)).unwrap();
    write_synth(&dir.path().join("data"), &data).unwrap();
    let cfg_path = dir.path().join("run.json");
    std::fs::write(
        &cfg_path,
        r#"{"id_manifest": "data/id/manifest.json", "wild_manifest": "data/wild/manifest.json",
            "output_dir": "out", "cluster": {"k": 6, "t": 0.2}, "seed": 4}"#,
    )
    .unwrap();
    let cfg = PipelineConfig::load(&cfg_path).unwrap();
    assert_eq!(cfg.cluster, ClusterChoice::Fixed(FixedCluster::new(6, 0.2)));
    let art = run_pipeline(&cfg).unwrap();
    assert!(art.scores.starts_with(dir.path().join("out")));
}
