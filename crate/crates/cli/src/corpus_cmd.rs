use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use sefun_core::corpus::{
    adjudicate_pair, confirm_pair, corpus_stats_from_path, decode_pair, encode_pair, load_annotation_records,
    load_corpus, save_corpus, AnnotationRecord, Corpus, CorpusStats, CorpusWriter, PairOutcome,
};
use sefun_core::harness::{gen_keyword_corpus, gen_synthetic_corpus, ClassWeights, TemplateSpec};
use sefun_core::taxonomy::{Level1, SentenceFunction};

use crate::io::{output, write_json_line};
use crate::Settings;

#[derive(Subcommand)]
pub enum CorpusCmd {
    /// Per-label segment counts of a corpus file.
    Stats { path: PathBuf },
    /// Merge three annotators' labels per pair into a labeled corpus.
    Adjudicate {
        /// Unlabeled corpus file.
        pairs: PathBuf,
        /// Annotation records, one JSON object per line.
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write pairs that wait for the dissenting annotator.
        #[arg(long)]
        pending: Option<PathBuf>,
    },
    /// Resolve pending pairs with the dissenters' answers.
    Confirm {
        pending: PathBuf,
        /// Lines of `{"pair_index": N, "agrees": true|false}`.
        answers: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a template-generated labeled corpus.
    Synth {
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, value_enum, default_value_t = Weights::Uniform)]
        weights: Weights,
        /// Tie response labels to the query's content word.
        #[arg(long)]
        keyword: bool,
        /// Probability that a keyword response label is drawn uniformly.
        #[arg(long, default_value_t = 0.0, requires = "keyword")]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Weights {
    Uniform,
    DatasetQuery,
    DatasetResponse,
}

/// A pair waiting for its dissenter, as stored in the pending file.
#[derive(Serialize, Deserialize)]
struct Pending {
    pair_index: usize,
    dissenter: String,
    pair: serde_json::Value,
}

#[derive(Deserialize)]
struct Answer {
    pair_index: usize,
    agrees: bool,
}

pub fn run(cmd: CorpusCmd, settings: &Settings) -> Result<()> {
    match cmd {
        CorpusCmd::Stats { path } => {
            let stats = corpus_stats_from_path(&path).with_context(|| format!("reading {}", path.display()))?;
            crate::io::emit(&stats_table(&stats)?)
        }
        CorpusCmd::Adjudicate { pairs, records, out, pending } => adjudicate(&pairs, &records, &out, pending.as_deref()),
        CorpusCmd::Confirm { pending, answers, out } => confirm(&pending, &answers, &out),
        CorpusCmd::Synth { pairs, weights, keyword, noise, out } => {
            let spec = TemplateSpec::default();
            let corpus = if keyword {
                gen_keyword_corpus(&spec, pairs, noise, settings.seed)?
            } else {
                let w = match weights {
                    Weights::Uniform => ClassWeights::uniform(),
                    Weights::DatasetQuery => ClassWeights::dataset_query(),
                    Weights::DatasetResponse => ClassWeights::dataset_response(),
                };
                gen_synthetic_corpus(&spec, pairs, &w, settings.seed)?
            };
            save_corpus(&corpus, &out)?;
            println!("wrote {} pairs to {}", corpus.len(), out.display());
            Ok(())
        }
    }
}

fn stats_table(stats: &CorpusStats) -> Result<String> {
    let mut s = String::new();
    writeln!(s, "pairs: {}", stats.pairs)?;
    writeln!(
        s,
        "segments: query {} ({} unlabeled), response {} ({} unlabeled)",
        stats.query.segments, stats.query.unlabeled, stats.response.segments, stats.response.unlabeled
    )?;
    writeln!(s, "{:<30} {:>9} {:>7} {:>9} {:>7}", "label", "query", "%", "response", "%")?;
    for l1 in Level1::ALL {
        writeln!(s, "{:<30} {:>9} {:>7} {:>9}", l1.abbrev(), stats.query.level1_count(l1), "", stats.response.level1_count(l1))?;
        for l2 in l1.children() {
            writeln!(
                s,
                "  {:<28} {:>9} {:>7.2} {:>9} {:>7.2}",
                SentenceFunction::new(l2).to_string(),
                stats.query.count(l2),
                stats.query.percent(l2),
                stats.response.count(l2),
                stats.response.percent(l2)
            )?;
        }
    }
    writeln!(s, "{:<30} {:>9} {:>7} {:>9}", "total labeled", stats.query.labeled(), "", stats.response.labeled())?;
    Ok(s)
}

fn adjudicate(pairs: &Path, records: &Path, out: &Path, pending_path: Option<&Path>) -> Result<()> {
    let corpus: Corpus = load_corpus(pairs).with_context(|| format!("reading {}", pairs.display()))?;
    let mut grouped: BTreeMap<usize, Vec<AnnotationRecord>> = BTreeMap::new();
    for r in load_annotation_records(records).with_context(|| format!("reading {}", records.display()))? {
        if r.pair_index >= corpus.len() {
            bail!("record for pair {} but the corpus has {} pairs", r.pair_index, corpus.len());
        }
        grouped.entry(r.pair_index).or_default().push(r);
    }
    let mut writer = CorpusWriter::create(out)?;
    let mut pending_out = pending_path.map(|p| output(Some(p))).transpose()?;
    let (mut accepted, mut waiting, mut unannotated) = (0, 0, 0);
    let mut dropped: BTreeMap<String, usize> = BTreeMap::new();
    for (i, pair) in corpus.pairs.iter().enumerate() {
        let Some(recs) = grouped.get(&i) else {
            unannotated += 1;
            continue;
        };
        match adjudicate_pair(pair, recs).with_context(|| format!("pair {i}"))? {
            PairOutcome::Accepted(p) => {
                writer.write(&p)?;
                accepted += 1;
            }
            PairOutcome::Dropped(reason) => *dropped.entry(reason.to_string()).or_default() += 1,
            PairOutcome::NeedsConfirmation { majority, dissenter } => {
                waiting += 1;
                if let Some(w) = pending_out.as_mut() {
                    let pair = serde_json::from_str(&encode_pair(&majority))?;
                    write_json_line(w, &Pending { pair_index: i, dissenter, pair })?;
                }
            }
        }
    }
    writer.finish()?;
    if let Some(mut w) = pending_out {
        w.flush()?;
    }
    println!("accepted: {accepted}");
    println!("pending confirmation: {waiting}");
    for (reason, n) in &dropped {
        println!("dropped ({reason}): {n}");
    }
    if unannotated > 0 {
        println!("without records: {unannotated}");
    }
    if waiting > 0 && pending_path.is_none() {
        log::warn!("{waiting} pending pairs were not saved; pass --pending to keep them");
    }
    Ok(())
}

fn confirm(pending: &Path, answers: &Path, out: &Path) -> Result<()> {
    let mut verdicts = BTreeMap::new();
    for (n, line) in BufReader::new(File::open(answers)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let a: Answer = serde_json::from_str(&line).with_context(|| format!("{} line {}", answers.display(), n + 1))?;
        verdicts.insert(a.pair_index, a.agrees);
    }
    let mut writer = CorpusWriter::create(out)?;
    let (mut accepted, mut rejected, mut unanswered) = (0, 0, 0);
    for (n, line) in BufReader::new(File::open(pending)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Pending = serde_json::from_str(&line).with_context(|| format!("{} line {}", pending.display(), n + 1))?;
        let Some(&agrees) = verdicts.get(&p.pair_index) else {
            unanswered += 1;
            continue;
        };
        let majority = decode_pair(&p.pair.to_string(), n + 1)?;
        match confirm_pair(&PairOutcome::NeedsConfirmation { majority, dissenter: p.dissenter }, agrees)? {
            PairOutcome::Accepted(pair) => {
                writer.write(&pair)?;
                accepted += 1;
            }
            _ => rejected += 1,
        }
    }
    writer.finish()?;
    println!("accepted: {accepted}");
    println!("rejected: {rejected}");
    if unanswered > 0 {
        println!("unanswered: {unanswered}");
    }
    Ok(())
}
