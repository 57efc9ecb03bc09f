//! Post-hoc out-of-distribution detection from exported activations.
//!
//! ID and WILD feature vectors are clustered jointly with k-means; clusters
//! holding enough known-ID rows are labeled ID and the rest OOD. A logistic
//! regression trained on those surrogate labels then scores new samples.
//! Metrics, the MSP / Energy / Mahalanobis baselines and the end-to-end
//! pipeline live alongside.
//!
//! With the default `parallel` feature the per-row loops run on rayon;
//! without it everything is sequential and produces the same numbers.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod classifier;
pub mod clustering;
pub mod data;
pub mod error;
pub mod geo;
pub mod io;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod pooling;
pub mod synth;
pub mod throughput;

pub use baselines::{energy_score, mahalanobis_fit, mahalanobis_score, msp_score, MahalanobisModel, Method};
pub use classifier::{train, ClassifierModel, TrainConfig, TrainedOn};
pub use clustering::{
    composite_objective, kmeans_fit, label_clusters, search_kt, ClusterConfig, ClusterModel, ObjectiveBreakdown,
};
pub use data::{load_dataset, DatasetManifest, FeatureMatrix, Origin, Role, SampleRecord};
pub use error::{Error, ErrorKind, Result};
pub use metrics::{auroc, fpr95, welch_t_test, EvalReport};
pub use pipeline::{run_on_data, run_pipeline, PipelineConfig, PipelineData};
pub use pooling::{pool, PoolingMethod};
pub use synth::{synth_generate, SynthSpec};
