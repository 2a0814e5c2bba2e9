use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Subcommand;
use serde::Serialize;

use sefun_core::classify::{CfmModel, CftModel};
use sefun_core::corpus::load_corpus;
use sefun_core::retrieve::{brute_force_topk, respond_ir, IrOptions, RankedCandidate, RetrievalIndex, Similarity, DEFAULT_TOPK};
use sefun_core::taxonomy::{Level, SentenceFunction, TargetFunction};

use crate::io::{output, read_texts, write_json_line};

#[derive(Subcommand)]
pub enum IrCmd {
    /// Build an inverted index over a corpus's queries.
    BuildIndex {
        corpus: PathBuf,
        index: PathBuf,
        #[arg(long, default_value = "set")]
        similarity: Similarity,
    },
    /// Answer queries by retrieval, optionally re-ranked toward the
    /// predicted response function.
    Respond {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        cfm: PathBuf,
        #[arg(long)]
        cft: PathBuf,
        #[arg(long, default_value = "1")]
        level: Level,
        #[arg(long)]
        rerank: bool,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = DEFAULT_TOPK)]
        topk: usize,
        /// Include every candidate with its scores.
        #[arg(long)]
        candidates: bool,
        texts: Vec<String>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare indexed retrieval with a brute-force scan over the corpus.
    Bench {
        corpus: PathBuf,
        /// Number of corpus queries to look up.
        #[arg(long, default_value_t = 100)]
        queries: usize,
        #[arg(long, default_value_t = DEFAULT_TOPK)]
        topk: usize,
        #[arg(long, default_value = "set")]
        similarity: Similarity,
    },
}

#[derive(Serialize)]
struct Answer<'a> {
    query: &'a str,
    query_sfs: &'a [SentenceFunction],
    target: TargetFunction,
    response: &'a str,
    base_score: f64,
    penalty: f64,
    rerank_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    candidates: Option<&'a [RankedCandidate]>,
}

pub fn run(cmd: IrCmd) -> Result<()> {
    match cmd {
        IrCmd::BuildIndex { corpus, index, similarity } => {
            let data = load_corpus(&corpus).with_context(|| format!("reading {}", corpus.display()))?;
            let idx = RetrievalIndex::build(&data, similarity)?;
            idx.save(&index)?;
            println!("indexed {} pairs into {}", idx.len(), index.display());
            Ok(())
        }
        IrCmd::Respond { index, cfm, cft, level, rerank, lambda, topk, candidates, texts, input, out } => {
            let index = RetrievalIndex::load(&index).with_context(|| format!("loading {}", index.display()))?;
            let cfm = CfmModel::load(&cfm).with_context(|| format!("loading {}", cfm.display()))?;
            let cft = CftModel::load(&cft).with_context(|| format!("loading {}", cft.display()))?;
            let options = IrOptions { level, rerank, lambda, topk };
            let mut w = output(out.as_deref())?;
            for query in read_texts(&texts, input.as_deref())? {
                let r = respond_ir(&index, &cfm, &cft, &query, &options).with_context(|| format!("query `{query}`"))?;
                let best = r.best();
                let answer = Answer {
                    query: &r.query,
                    query_sfs: &r.query_functions,
                    target: r.target,
                    response: &best.response,
                    base_score: best.base_score,
                    penalty: best.penalty,
                    rerank_score: best.rerank_score,
                    candidates: candidates.then_some(r.candidates.as_slice()),
                };
                write_json_line(&mut w, &answer)?;
            }
            w.flush()?;
            Ok(())
        }
        IrCmd::Bench { corpus, queries, topk, similarity } => {
            let data = load_corpus(&corpus).with_context(|| format!("reading {}", corpus.display()))?;
            let start = Instant::now();
            let idx = RetrievalIndex::build(&data, similarity)?;
            let build = start.elapsed();
            let probes: Vec<Vec<String>> = data.pairs.iter().take(queries).map(|p| p.query_tokens()).collect();
            let start = Instant::now();
            let indexed: Vec<Vec<(usize, f64)>> = probes
                .iter()
                .map(|q| idx.retrieve_topk(q, topk).into_iter().map(|c| (c.pair_id, c.base_score)).collect())
                .collect();
            let t_index = start.elapsed();
            let start = Instant::now();
            let brute: Vec<Vec<(usize, f64)>> = probes.iter().map(|q| brute_force_topk(&data, q, topk, similarity)).collect();
            let t_brute = start.elapsed();
            let mismatches = indexed.iter().zip(&brute).filter(|(a, b)| a != b).count();
            println!("pairs: {}, queries: {}, top-{topk}", data.len(), probes.len());
            println!("index build: {:.3} s", build.as_secs_f64());
            println!("indexed lookup: {:.3} s", t_index.as_secs_f64());
            println!("brute force: {:.3} s", t_brute.as_secs_f64());
            println!("agreement: {}/{}", probes.len() - mismatches, probes.len());
            if mismatches > 0 {
                bail!("{mismatches} queries differ from brute force");
            }
            Ok(())
        }
    }
}
