//! End-to-end runs over synthetic cohorts: classifier, attributions, SAE, explanation
//! optimizer, metrics, cohort embedding and reports.

pub mod config;
pub mod pipeline;
pub mod render;

pub use config::RunConfig;
pub use pipeline::{run_pipeline, run_stage, Run, STAGES};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Core(#[from] monosem::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        source: Box<PipelineError>,
    },
}

impl PipelineError {
    /// The error underneath any stage tag.
    pub fn root(&self) -> &PipelineError {
        match self {
            PipelineError::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
