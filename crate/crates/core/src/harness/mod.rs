//! Evaluation metrics, synthetic template corpora, grading sheets and the
//! end-to-end pipeline.

mod grading;
mod metrics;
mod pipeline;
mod synth;

pub use grading::{
    average_scores, export_grading_sheet, ingest_grading_sheet, ingest_grading_sheets, read_key, GradeScores,
    GradingItem, GradingSheet, SheetRow, SystemOutputs, ASPECTS, DEFAULT_SAMPLE, KEY_HEADER, MAX_GRADE, SHEET_HEADER,
};
pub use metrics::{accuracy, evaluate, macro_f1, micro_f1, ClassReport, EvalReport};
pub use pipeline::{
    classify_response, label_segments, run_pipeline, PipelineConfig, PipelineReport, ResponseRecord, SyntheticData,
    System, SystemReport,
};
pub use synth::{
    gen_keyword_corpus, gen_synthetic_corpus, keyword_label, ClassWeights, Template, TemplateSpec,
    DATASET_QUERY_COUNTS, DATASET_RESPONSE_COUNTS, WORD_POOL,
};

use thiserror::Error;

use crate::classify::ClassifyError;
use crate::corpus::CorpusError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("gold has {gold} labels but predictions have {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("no labels to score")]
    EmptyInput,
    #[error("class weights must be finite, non-negative and not all zero")]
    InvalidWeights,
    #[error("template spec: {0}")]
    InvalidSpec(String),
    #[error("no systems to compare")]
    NoSystems,
    #[error("system `{system}` has {found} responses for {expected} queries")]
    CoverageMismatch { system: String, expected: usize, found: usize },
    #[error("row {row}: {aspect} grade `{value}` is not an integer in 0..=5")]
    InvalidGrade { row: usize, aspect: String, value: String },
    #[error("rows without grades: {0:?}")]
    MissingGrades(Vec<usize>),
    #[error("grading sheet: {0}")]
    Sheet(String),
    #[error("config: {0}")]
    Config(String),
    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}
