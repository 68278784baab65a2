//! Corpora, metrics, experiment pipelines and reports.

pub mod corpus;
pub mod metrics;
pub mod pipeline;
pub mod report;

pub use corpus::{synthetic_corpus, Corpus, SyntheticCorpusConfig};
pub use metrics::{
    block_output_cloud, detector_fpr, extract_feature_cloud, jet_feature_cloud, perplexity, perplexity_ratio,
    ExtractMode, FprResult, JetDetectorView,
};
pub use pipeline::{run_pipeline, PipelineConfig};
pub use report::{EvalReport, LayerReport, PipelineKind, SampleRecord, Stats, REPORT_SCHEMA_VERSION};
