//! Sentence-function classifiers.
//!
//! [`CfmModel`] labels single segments hierarchically: a level-1 head reads
//! the sentence vector, and the level-2 head reads the sentence vector plus
//! an embedding of the predicted level-1 label. [`CftModel`] predicts the
//! function a response should carry from the query text and, optionally,
//! the bag of query functions.

mod cfm;
mod cft;

pub use cfm::{annotate_corpus, annotate_corpus_file, train_cfm, CfmLog, CfmModel};
pub use cft::{train_cft, CftModel, ResponseSfDistribution};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusError;
use crate::nncore::{EncoderCache, EncoderKind, Embedding, Gradients, NnError, ParameterSet, SentenceEncoder, TrainConfig};
use crate::taxonomy::{Level, Level1, Level2, SentenceFunction, TargetFunction};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("segment `{0}` has no sentence-function label")]
    UnlabeledSegment(String),
    #[error("no training examples")]
    EmptyCorpus,
    #[error("segment has no tokens")]
    EmptySegment,
    #[error("query has no tokens")]
    EmptyQuery,
    #[error("record {index}: {source}")]
    Record {
        index: usize,
        #[source]
        source: Box<ClassifyError>,
    },
    #[error("model metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Which segments a CfM model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setup {
    /// Query segments only.
    Query,
    /// Response segments only.
    Response,
    /// Query and response segments mixed.
    Joint,
}

impl FromStr for Setup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "query" => Ok(Setup::Query),
            "response" => Ok(Setup::Response),
            "joint" => Ok(Setup::Joint),
            other => Err(format!("unknown setup `{other}` (expected query, response or joint)")),
        }
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setup::Query => "query",
            Setup::Response => "response",
            Setup::Joint => "joint",
        })
    }
}

/// Output of the hierarchical classifier for one segment. The two heads are
/// independent, so `level1` need not be the parent of `level2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub level1: Level1,
    pub level2: Level2,
    pub prob_level1: f64,
    pub prob_level2: f64,
}

impl Prediction {
    pub fn function(&self) -> SentenceFunction {
        SentenceFunction::new(self.level2)
    }

    /// Predicted label at `level` with its probability.
    pub fn at(&self, level: Level) -> (TargetFunction, f64) {
        match level {
            Level::One => (TargetFunction::Level1(self.level1), self.prob_level1),
            Level::Two => (TargetFunction::Level2(self.function()), self.prob_level2),
        }
    }
}

/// Taxonomy codes stored with every model so files from a different label
/// order are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct TaxonomyCodes {
    level1: Vec<String>,
    level2: Vec<String>,
}

impl TaxonomyCodes {
    pub(crate) fn current() -> Self {
        TaxonomyCodes {
            level1: Level1::ALL.iter().map(|l| l.abbrev().to_string()).collect(),
            level2: Level2::ALL.iter().map(|l| SentenceFunction::new(*l).to_string()).collect(),
        }
    }

    pub(crate) fn check(&self) -> Result<(), ClassifyError> {
        if *self != TaxonomyCodes::current() {
            return Err(ClassifyError::Meta("label codes differ from this build's taxonomy".into()));
        }
        Ok(())
    }
}

/// Word embedding followed by a sentence encoder.
#[derive(Debug, Clone)]
pub(crate) struct TextEncoder {
    embed: Embedding,
    encoder: SentenceEncoder,
}

impl TextEncoder {
    pub(crate) fn new<R: Rng>(
        p: &mut ParameterSet,
        vocab_len: usize,
        kind: EncoderKind,
        config: &TrainConfig,
        rng: &mut R,
    ) -> Self {
        let embed = Embedding::new(p, "emb", vocab_len, config.embed_dim, rng);
        let encoder = SentenceEncoder::new(
            p,
            "enc",
            kind,
            config.embed_dim,
            config.hidden_dim,
            &config.cnn_widths,
            config.cnn_filters,
            rng,
        );
        TextEncoder { embed, encoder }
    }

    pub(crate) fn forward(&self, p: &ParameterSet, ids: &[usize]) -> Result<(Vec<f64>, EncoderCache), NnError> {
        self.encoder.encode(p, &self.embed.lookup(p, ids))
    }

    pub(crate) fn backward(&self, p: &ParameterSet, ids: &[usize], cache: &EncoderCache, dv: &[f64], g: &mut Gradients) {
        let dxs = self.encoder.backward(p, cache, dv, g);
        self.embed.backward(ids, &dxs, g);
    }
}

fn meta_field<T: serde::de::DeserializeOwned>(meta: &serde_json::Value, key: &str) -> Result<T, ClassifyError> {
    let v = meta.get(key).ok_or_else(|| ClassifyError::Meta(format!("missing `{key}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| ClassifyError::Meta(format!("`{key}`: {e}")))
}

/// Fraction of held-out items classified correctly; `None` when empty.
fn accuracy_of<I: Iterator<Item = bool>>(hits: I) -> Option<f64> {
    let (mut n, mut ok) = (0usize, 0usize);
    for h in hits {
        n += 1;
        ok += usize::from(h);
    }
    (n > 0).then(|| ok as f64 / n as f64)
}

/// Deterministic train/validation split of `n` items.
fn split_indices<R: Rng>(n: usize, fraction: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64) * fraction).floor() as usize;
    let n_val = if n_val >= n { 0 } else { n_val };
    let val = idx.split_off(n - n_val);
    (idx, val)
}
