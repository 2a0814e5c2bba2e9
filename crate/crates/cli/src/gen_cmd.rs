use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Subcommand, ValueEnum};
use serde::Serialize;

use sefun_core::corpus::{load_corpus, DefaultTokenizer, Tokenizer};
use sefun_core::generate::{train_cseq2seq, train_seq2seq, Seq2SeqModel, DEFAULT_BEAM, DEFAULT_MAX_LEN};
use sefun_core::taxonomy::{Level, TargetFunction};

use crate::io::{output, read_texts, write_json_line};
use crate::Settings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Seq2seq,
    Cseq2seq,
}

#[derive(Subcommand)]
pub enum GenCmd {
    /// Train an attention encoder-decoder on a corpus.
    Train {
        #[arg(long, value_enum, default_value_t = ModelKind::Seq2seq)]
        model: ModelKind,
        /// Granularity of the conditioning label for cseq2seq.
        #[arg(long, default_value = "1")]
        level: Level,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the vocabulary as a standalone file.
        #[arg(long)]
        vocab_out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate responses with beam search.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BEAM)]
        beam: usize,
        /// Response function to condition on, as `L1:L2` or a level-1 name.
        #[arg(long)]
        target_sf: Option<TargetFunction>,
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        max_len: usize,
        /// Number of hypotheses to print per query.
        #[arg(long, default_value_t = 1)]
        nbest: usize,
        texts: Vec<String>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct Scored {
    response: String,
    score: f64,
    log_prob: f64,
}

#[derive(Serialize)]
struct DecodeOutput {
    query: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    target: Option<TargetFunction>,
    response: String,
    score: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    nbest: Vec<Scored>,
}

pub fn run(cmd: GenCmd, settings: &Settings) -> Result<()> {
    match cmd {
        GenCmd::Train { model, level, corpus, out, vocab_out, epochs } => {
            let data = load_corpus(&corpus).with_context(|| format!("reading {}", corpus.display()))?;
            let config = settings.train_with(epochs);
            let trained = match model {
                ModelKind::Seq2seq => train_seq2seq(&data, &config)?,
                ModelKind::Cseq2seq => train_cseq2seq(&data, level, &config)?,
            };
            let log = trained.log();
            if let Some(last) = log.epochs.last() {
                println!("{} epochs, best epoch {}, final training loss {:.4}", log.epochs.len(), log.best_epoch, last.train_loss);
            }
            trained.save(&out)?;
            if let Some(v) = vocab_out {
                trained.vocab().save(&v)?;
            }
            println!("saved {}", out.display());
            Ok(())
        }
        GenCmd::Decode { model, beam, target_sf, max_len, nbest, texts, input, out } => {
            let model = Seq2SeqModel::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let mut w = output(out.as_deref())?;
            for query in read_texts(&texts, input.as_deref())? {
                let tokens = DefaultTokenizer.tokenize(&query);
                let result = model.beam_search(&tokens, target_sf, beam, max_len).with_context(|| format!("query `{query}`"))?;
                let best = result.best();
                let record = DecodeOutput {
                    response: best.text(),
                    score: best.score(),
                    target: target_sf,
                    nbest: if nbest > 1 {
                        result
                            .nbest
                            .iter()
                            .take(nbest)
                            .map(|h| Scored { response: h.text(), score: h.score(), log_prob: h.log_prob })
                            .collect()
                    } else {
                        Vec::new()
                    },
                    query,
                };
                write_json_line(&mut w, &record)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}
