//! End-to-end comparison of response systems on one test set.

use std::fmt::{self, Write as _};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::grading::{export_grading_sheet, GradingItem, SystemOutputs, DEFAULT_SAMPLE};
use super::metrics::{evaluate, EvalReport};
use super::synth::{gen_keyword_corpus, TemplateSpec};
use super::HarnessError;
use crate::classify::{train_cfm, train_cft, CfmModel, CftModel, Prediction, Setup};
use crate::corpus::{detokenize, load_corpus, segment, Corpus, DefaultTokenizer, Tokenizer};
use crate::generate::{train_cseq2seq, train_seq2seq, Seq2SeqModel, DEFAULT_BEAM, DEFAULT_MAX_LEN};
use crate::nncore::{EncoderKind, TrainConfig};
use crate::retrieve::{respond_with_target, IrOptions, RetrievalIndex, Similarity, DEFAULT_TOPK};
use crate::taxonomy::{Level, SentenceFunction, TargetFunction};

/// A response system compared by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum System {
    Ir,
    IrRerank,
    Seq2seq,
    Cseq2seq,
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            System::Ir => "ir",
            System::IrRerank => "ir-rerank",
            System::Seq2seq => "seq2seq",
            System::Cseq2seq => "cseq2seq",
        })
    }
}

/// Synthetic data used when no corpus paths are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticData {
    pub train_pairs: usize,
    pub test_pairs: usize,
    /// Probability that a response label ignores the keyword rule.
    pub noise: f64,
}

impl Default for SyntheticData {
    fn default() -> Self {
        SyntheticData { train_pairs: 2000, test_pairs: 100, noise: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds data generation, grading-sheet shuffling and every model.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub train_corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub synthetic: SyntheticData,
    /// Pre-trained models; trained on the training corpus when absent.
    pub cfm_model: Option<PathBuf>,
    pub cft_model: Option<PathBuf>,
    pub encoder: EncoderKind,
    /// Target granularity, 1 or 2.
    pub level: u8,
    pub systems: Vec<System>,
    pub lambda: f64,
    pub topk: usize,
    pub beam: usize,
    pub max_len: usize,
    pub grading_sample: usize,
    pub classifier: TrainConfig,
    pub generator: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 1,
            output_dir: PathBuf::from("pipeline-out"),
            train_corpus: None,
            test_corpus: None,
            synthetic: SyntheticData::default(),
            cfm_model: None,
            cft_model: None,
            encoder: EncoderKind::Rnn,
            level: 1,
            systems: vec![System::Ir, System::IrRerank],
            lambda: 1.0,
            topk: DEFAULT_TOPK,
            beam: DEFAULT_BEAM,
            max_len: DEFAULT_MAX_LEN,
            grading_sample: DEFAULT_SAMPLE,
            classifier: TrainConfig::desk(),
            generator: TrainConfig { max_epochs: 10, ..TrainConfig::desk() },
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        PipelineConfig::from_toml(&fs::read_to_string(path)?)
    }

    pub fn target_level(&self) -> Result<Level, HarnessError> {
        match self.level {
            1 => Ok(Level::One),
            2 => Ok(Level::Two),
            l => Err(HarnessError::Config(format!("level must be 1 or 2, got {l}"))),
        }
    }
}

fn stage<T, E: std::error::Error + Send + Sync + 'static>(name: &'static str, r: Result<T, E>) -> Result<T, HarnessError> {
    r.map_err(|e| HarnessError::Stage { stage: name, source: Box::new(e) })
}

/// Tokens and CfM-predicted functions of every segment of `text`.
pub fn label_segments(cfm: &CfmModel, text: &str) -> Result<(Vec<String>, Vec<SentenceFunction>), HarnessError> {
    let mut tokens = Vec::new();
    let mut functions = Vec::new();
    for s in segment(text)? {
        let t = DefaultTokenizer.tokenize(&s);
        if t.is_empty() {
            continue;
        }
        functions.push(cfm.predict_sf(&t)?.function());
        tokens.extend(t);
    }
    Ok((tokens, functions))
}

/// CfM prediction for the first segment of a response; `None` when the
/// response has no tokens.
pub fn classify_response(cfm: &CfmModel, text: &str) -> Result<Option<Prediction>, HarnessError> {
    let Ok(segments) = segment(text) else { return Ok(None) };
    for s in segments {
        let t = DefaultTokenizer.tokenize(&s);
        if !t.is_empty() {
            return Ok(Some(cfm.predict_sf(&t)?));
        }
    }
    Ok(None)
}

/// One system's output for one test query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub query_index: usize,
    pub system: System,
    pub query: String,
    pub target: TargetFunction,
    pub response: String,
    /// CfM label of the response at the target level, if it has tokens.
    pub predicted: Option<TargetFunction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub system: System,
    /// Fraction of responses whose CfM label equals the target; an automatic
    /// stand-in for the human Accuracy aspect.
    pub target_sf_accuracy: f64,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub level: Level,
    pub test_queries: usize,
    pub systems: Vec<SystemReport>,
    pub records: Vec<ResponseRecord>,
}

impl PipelineReport {
    pub fn system(&self, s: System) -> Option<&SystemReport> {
        self.systems.iter().find(|r| r.system == s)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let level = match self.level {
            Level::One => 1,
            Level::Two => 2,
        };
        let _ = writeln!(out, "sefun pipeline report");
        let _ = writeln!(out, "test queries {}  target level {level}", self.test_queries);
        let _ = writeln!(out, "target-SF accuracy is CfM(response) == CfT target, a proxy for human Accuracy");
        for s in &self.systems {
            let _ = writeln!(out, "\n== {}  target-SF accuracy {:.4}", s.system, s.target_sf_accuracy);
            let _ = write!(out, "{}", s.eval);
        }
        out
    }

    pub fn write_records<W: Write>(&self, mut out: W) -> Result<(), HarnessError> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r).map_err(|e| HarnessError::Config(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn load_data(config: &PipelineConfig) -> Result<(Corpus, Corpus), HarnessError> {
    let spec = TemplateSpec::default();
    let s = &config.synthetic;
    let train = match &config.train_corpus {
        Some(p) => load_corpus(p)?,
        None => gen_keyword_corpus(&spec, s.train_pairs, s.noise, config.seed)?,
    };
    let test = match &config.test_corpus {
        Some(p) => load_corpus(p)?,
        None => gen_keyword_corpus(&spec, s.test_pairs, s.noise, config.seed.wrapping_add(1))?,
    };
    Ok((train, test))
}

/// Trains or loads every model, answers the test queries with each system,
/// scores the answers and writes `report.txt`, `records.jsonl`,
/// `grading.csv` and `grading_key.csv` to the output directory.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineReport, HarnessError> {
    let level = config.target_level()?;
    if config.systems.is_empty() {
        return Err(HarnessError::NoSystems);
    }
    let (train, test) = stage("data", load_data(config))?;
    info!("pipeline: {} training pairs, {} test pairs", train.len(), test.len());
    let classifier = TrainConfig { seed: config.seed, ..config.classifier.clone() };
    let generator = TrainConfig { seed: config.seed, ..config.generator.clone() };

    let cfm = match &config.cfm_model {
        Some(p) => stage("cfm", CfmModel::load(p))?,
        None => stage("cfm", train_cfm(&train, Setup::Joint, config.encoder, &classifier))?,
    };
    let cft = match &config.cft_model {
        Some(p) => stage("cft", CftModel::load(p))?,
        None => stage("cft", train_cft(&train, true, config.encoder, &classifier))?,
    };

    let mut queries = Vec::with_capacity(test.len());
    for pair in &test.pairs {
        let text = pair.query_text();
        let (tokens, functions) = stage("targets", label_segments(&cfm, &text))?;
        let target = stage("targets", cft.predict_response_sf(&tokens, &functions))?.target(level);
        queries.push((text, tokens, target));
    }

    let mut systems = config.systems.clone();
    systems.sort();
    systems.dedup();
    let index = if systems.iter().any(|s| matches!(s, System::Ir | System::IrRerank)) {
        Some(stage("index", RetrievalIndex::build(&train, Similarity::Set))?)
    } else {
        None
    };

    let mut outputs = Vec::new();
    for &system in &systems {
        let responses = match system {
            System::Ir | System::IrRerank => {
                let index = index.as_ref().expect("index built for IR systems");
                let options = IrOptions { level, rerank: system == System::IrRerank, lambda: config.lambda, topk: config.topk };
                let mut out = Vec::with_capacity(queries.len());
                for (_, tokens, target) in &queries {
                    let c = stage("respond", respond_with_target(index, &cfm, tokens, *target, &options))?;
                    out.push(c[0].response.clone());
                }
                out
            }
            System::Seq2seq | System::Cseq2seq => {
                let model: Seq2SeqModel = if system == System::Seq2seq {
                    stage("seq2seq", train_seq2seq(&train, &generator))?
                } else {
                    stage("cseq2seq", train_cseq2seq(&train, level, &generator))?
                };
                let conditioned = model.conditioning().is_some();
                let mut out = Vec::with_capacity(queries.len());
                for (_, tokens, target) in &queries {
                    let t = conditioned.then_some(*target);
                    let beam = stage("decode", model.beam_search(tokens, t, config.beam, config.max_len))?;
                    out.push(detokenize(&beam.best().words));
                }
                out
            }
        };
        outputs.push((system, responses));
    }

    let mut reports = Vec::new();
    let mut records = Vec::new();
    for (system, responses) in &outputs {
        let mut gold = Vec::with_capacity(responses.len());
        let mut pred = Vec::with_capacity(responses.len());
        for (i, ((query, _, target), response)) in queries.iter().zip(responses).enumerate() {
            let predicted = stage("evaluate", classify_response(&cfm, response))?.map(|p| p.at(level).0);
            gold.push(target.to_string());
            pred.push(predicted.map_or_else(|| "<none>".to_string(), |p| p.to_string()));
            records.push(ResponseRecord {
                query_index: i,
                system: *system,
                query: query.clone(),
                target: *target,
                response: response.clone(),
                predicted,
            });
        }
        let eval = stage("evaluate", evaluate(&gold, &pred))?;
        info!("pipeline: {system} target-SF accuracy {:.4}", eval.accuracy);
        reports.push(SystemReport { system: *system, target_sf_accuracy: eval.accuracy, eval });
    }
    let report = PipelineReport { level, test_queries: queries.len(), systems: reports, records };

    let items: Vec<GradingItem> =
        queries.iter().map(|(q, _, t)| GradingItem { query: q.clone(), target: *t }).collect();
    let sheet_systems: Vec<SystemOutputs> =
        outputs.into_iter().map(|(s, r)| SystemOutputs { name: s.to_string(), responses: r }).collect();
    let sheet = stage("grading", export_grading_sheet(&items, &sheet_systems, config.grading_sample, config.seed))?;

    let dir = &config.output_dir;
    stage("write", fs::create_dir_all(dir))?;
    stage("write", fs::write(dir.join("report.txt"), report.render()))?;
    let mut records = Vec::new();
    report.write_records(&mut records)?;
    stage("write", fs::write(dir.join("records.jsonl"), records))?;
    sheet.save(&dir.join("grading.csv"), &dir.join("grading_key.csv"))?;
    Ok(report)
}
