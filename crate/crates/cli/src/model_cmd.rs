use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Subcommand;
use serde::Serialize;

use sefun_core::classify::{annotate_corpus_file, train_cfm, train_cft, CfmModel, CftModel, Setup};
use sefun_core::corpus::{load_corpus, segment, DefaultTokenizer, Tokenizer};
use sefun_core::harness::label_segments;
use sefun_core::nncore::{EncoderKind, FitLog};
use sefun_core::taxonomy::{Level, Level1, SentenceFunction, TargetFunction};

use crate::io::{output, read_texts, write_json_line};
use crate::Settings;

#[derive(Subcommand)]
pub enum CfmCmd {
    /// Train the hierarchical sentence-function classifier.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "joint")]
        setup: Setup,
        #[arg(long, default_value = "rnn")]
        encoder: EncoderKind,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `max_epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Label every segment of each input text.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Texts to label; read from --input or stdin when absent.
        texts: Vec<String>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tag every segment of a corpus file with predicted labels.
    Annotate {
        #[arg(long)]
        model: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
}

#[derive(Subcommand)]
pub enum CftCmd {
    /// Train the response sentence-function predictor.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "rnn")]
        encoder: EncoderKind,
        /// Also condition on the query's sentence functions.
        #[arg(long)]
        with_query_sf: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Predict the response function of each query.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Labels query segments; needed by models trained with query functions.
        #[arg(long)]
        cfm: Option<PathBuf>,
        texts: Vec<String>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct SegmentLabel {
    text: String,
    sf: SentenceFunction,
    level1: Level1,
    p1: f64,
    p2: f64,
}

#[derive(Serialize)]
struct CfmOutput {
    text: String,
    segments: Vec<SegmentLabel>,
}

#[derive(Serialize)]
struct CftOutput {
    query: String,
    query_sfs: Vec<SentenceFunction>,
    level1: TargetFunction,
    level2: TargetFunction,
    p_level1: Vec<f64>,
    p_level2: Vec<f64>,
}

fn report_fit(name: &str, log: &FitLog) {
    if let Some(last) = log.epochs.last() {
        println!(
            "{name}: {} epochs, best epoch {} (score {:.4}), final training loss {:.4}",
            log.epochs.len(),
            log.best_epoch,
            log.best_score,
            last.train_loss
        );
    }
}

pub fn run_cfm(cmd: CfmCmd, settings: &Settings) -> Result<()> {
    match cmd {
        CfmCmd::Train { corpus, setup, encoder, out, epochs } => {
            let data = load_corpus(&corpus).with_context(|| format!("reading {}", corpus.display()))?;
            let model = train_cfm(&data, setup, encoder, &settings.train_with(epochs))?;
            report_fit("level 1", &model.log().level1);
            report_fit("level 2", &model.log().level2);
            model.save(&out)?;
            println!("saved {}", out.display());
            Ok(())
        }
        CfmCmd::Predict { model, texts, input, out } => {
            let model = CfmModel::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let mut w = output(out.as_deref())?;
            for text in read_texts(&texts, input.as_deref())? {
                let mut segments = Vec::new();
                for s in segment(&text)? {
                    let tokens = DefaultTokenizer.tokenize(&s);
                    if tokens.is_empty() {
                        continue;
                    }
                    let p = model.predict_sf(&tokens)?;
                    segments.push(SegmentLabel {
                        text: s,
                        sf: p.function(),
                        level1: p.level1,
                        p1: p.prob_level1,
                        p2: p.prob_level2,
                    });
                }
                write_json_line(&mut w, &CfmOutput { text, segments })?;
            }
            w.flush()?;
            Ok(())
        }
        CfmCmd::Annotate { model, input, output } => {
            let model = CfmModel::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let n = annotate_corpus_file(&model, &input, &output)?;
            println!("annotated {n} pairs into {}", output.display());
            Ok(())
        }
    }
}

pub fn run_cft(cmd: CftCmd, settings: &Settings) -> Result<()> {
    match cmd {
        CftCmd::Train { corpus, encoder, with_query_sf, out, epochs } => {
            let data = load_corpus(&corpus).with_context(|| format!("reading {}", corpus.display()))?;
            let model = train_cft(&data, with_query_sf, encoder, &settings.train_with(epochs))?;
            report_fit("cft", model.log());
            model.save(&out)?;
            println!("saved {}", out.display());
            Ok(())
        }
        CftCmd::Predict { model, cfm, texts, input, out } => {
            let model = CftModel::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let cfm = cfm.map(|p| CfmModel::load(&p).with_context(|| format!("loading {}", p.display()))).transpose()?;
            if model.with_query_sf() && cfm.is_none() {
                bail!("this model uses query sentence functions; pass --cfm");
            }
            let mut w = output(out.as_deref())?;
            for query in read_texts(&texts, input.as_deref())? {
                let (tokens, query_sfs) = match &cfm {
                    Some(cfm) => label_segments(cfm, &query)?,
                    None => (DefaultTokenizer.tokenize(&query), Vec::new()),
                };
                let dist = model.predict_response_sf(&tokens, &query_sfs)?;
                let record = CftOutput {
                    query,
                    query_sfs,
                    level1: dist.target(Level::One),
                    level2: dist.target(Level::Two),
                    p_level1: dist.level1,
                    p_level2: dist.level2,
                };
                write_json_line(&mut w, &record)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}
