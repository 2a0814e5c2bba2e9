//! Jaccard retrieval over stored queries with sentence-function-aware
//! re-ranking of the candidates.

mod index;

pub use index::{brute_force_topk, RetrievalIndex, Similarity, INDEX_MAGIC};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{CfmModel, CftModel, ClassifyError, Prediction};
use crate::corpus::{segment, CorpusError, DefaultTokenizer, Tokenizer};
use crate::taxonomy::{Level, SentenceFunction, TargetFunction};

/// Default candidate list length.
pub const DEFAULT_TOPK: usize = 20;

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("candidate response has no tokens")]
    EmptyCandidate,
    #[error("candidate list is empty")]
    EmptyCandidateList,
    #[error("retrieval returned no candidates")]
    NoCandidates,
    #[error("malformed index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// `|a ∩ b| / |a ∪ b|`; two empty sets score 0.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    ratio(inter, union)
}

/// Jaccard over token multisets: summed minimum counts over summed maximum
/// counts.
pub fn multiset_jaccard<S: AsRef<str>>(a: &[S], b: &[S]) -> f64 {
    fn count<S: AsRef<str>>(xs: &[S]) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for x in xs {
            *m.entry(x.as_ref()).or_default() += 1;
        }
        m
    }
    let (ca, cb) = (count(a), count(b));
    let inter: usize = ca.iter().map(|(t, n)| (*n).min(cb.get(t).copied().unwrap_or(0))).sum();
    ratio(inter, a.len() + b.len() - inter)
}

pub(crate) fn ratio(inter: usize, union: usize) -> f64 {
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// A retrieved response with its scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub pair_id: usize,
    pub response: String,
    /// Tokens of the first response segment, which stands for the response
    /// when classifying it.
    pub lead_tokens: Vec<String>,
    pub base_score: f64,
    pub prediction: Option<Prediction>,
    pub penalty: f64,
    pub rerank_score: f64,
}

/// Zero when the prediction matches `target` at its level, otherwise the
/// probability of the (wrong) predicted label.
pub fn penalty_for(prediction: &Prediction, target: TargetFunction) -> f64 {
    let (predicted, prob) = prediction.at(target.level());
    if predicted == target {
        0.0
    } else {
        prob
    }
}

/// Classifies the candidate's lead segment and returns its penalty.
pub fn penalty(candidate: &RankedCandidate, target: TargetFunction, cfm: &CfmModel) -> Result<(Prediction, f64), RetrieveError> {
    if candidate.lead_tokens.is_empty() {
        return Err(RetrieveError::EmptyCandidate);
    }
    let pred = cfm.predict_sf(&candidate.lead_tokens)?;
    Ok((pred, penalty_for(&pred, target)))
}

/// Fills `prediction` and `penalty` for every candidate.
pub fn assign_penalties(candidates: &mut [RankedCandidate], target: TargetFunction, cfm: &CfmModel) -> Result<(), RetrieveError> {
    for c in candidates {
        let (pred, p) = penalty(c, target, cfm)?;
        c.prediction = Some(pred);
        c.penalty = p;
    }
    Ok(())
}

/// Re-scores `candidates` (sorted by base score, penalties filled) with
/// `s_i - λ (s_1 - s_k) p_i` and sorts by the new score.
///
/// `k` is clamped to the list length. At equal scores, candidates whose
/// score was actually lowered sort after the others, then input order is
/// kept; λ = 0 is therefore always the identity.
pub fn rerank(mut candidates: Vec<RankedCandidate>, lambda: f64, k: usize) -> Result<Vec<RankedCandidate>, RetrieveError> {
    if candidates.is_empty() {
        return Err(RetrieveError::EmptyCandidateList);
    }
    let k = k.clamp(1, candidates.len());
    let spread = candidates[0].base_score - candidates[k - 1].base_score;
    let mut keyed: Vec<(bool, usize, RankedCandidate)> = candidates
        .drain(..)
        .enumerate()
        .map(|(pos, mut c)| {
            let cut = lambda * spread * c.penalty;
            c.rerank_score = c.base_score - cut;
            (cut > 0.0, pos, c)
        })
        .collect();
    keyed.sort_by(|a, b| {
        b.2.rerank_score
            .total_cmp(&a.2.rerank_score)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    Ok(keyed.into_iter().map(|(_, _, c)| c).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrOptions {
    pub level: Level,
    pub rerank: bool,
    pub lambda: f64,
    pub topk: usize,
}

impl Default for IrOptions {
    fn default() -> Self {
        IrOptions { level: Level::One, rerank: true, lambda: 1.0, topk: DEFAULT_TOPK }
    }
}

/// Result of answering one query, with every candidate for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrResponse {
    pub query: String,
    pub query_functions: Vec<SentenceFunction>,
    pub target: TargetFunction,
    pub candidates: Vec<RankedCandidate>,
}

impl IrResponse {
    pub fn best(&self) -> &RankedCandidate {
        &self.candidates[0]
    }
}

/// Retrieves candidates for `query_tokens`, scores penalties against
/// `target` and optionally re-ranks.
pub fn respond_with_target<S: AsRef<str>>(
    index: &RetrievalIndex,
    cfm: &CfmModel,
    query_tokens: &[S],
    target: TargetFunction,
    options: &IrOptions,
) -> Result<Vec<RankedCandidate>, RetrieveError> {
    let mut candidates = index.retrieve_topk(query_tokens, options.topk);
    if candidates.is_empty() {
        return Err(RetrieveError::NoCandidates);
    }
    assign_penalties(&mut candidates, target, cfm)?;
    if options.rerank {
        rerank(candidates, options.lambda, options.topk)
    } else {
        Ok(candidates)
    }
}

/// Full IR pipeline: segment the query, label its segments with `cfm`,
/// predict the target response function with `cft`, retrieve and re-rank.
pub fn respond_ir(
    index: &RetrievalIndex,
    cfm: &CfmModel,
    cft: &CftModel,
    query: &str,
    options: &IrOptions,
) -> Result<IrResponse, RetrieveError> {
    let segments = segment(query)?;
    let mut tokens = Vec::new();
    let mut functions = Vec::new();
    for s in &segments {
        let t = DefaultTokenizer.tokenize(s);
        if t.is_empty() {
            continue;
        }
        functions.push(cfm.predict_sf(&t)?.function());
        tokens.extend(t);
    }
    let target = cft.predict_response_sf(&tokens, &functions)?.target(options.level);
    let candidates = respond_with_target(index, cfm, &tokens, target, options)?;
    Ok(IrResponse { query: query.to_string(), query_functions: functions, target, candidates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{Level1, Level2};

    fn set(xs: &[&'static str]) -> BTreeSet<&'static str> {
        xs.iter().copied().collect()
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&set(&["a", "b", "c"]), &set(&["b", "c", "d"])), 0.5);
        assert_eq!(jaccard(&set(&["a", "b"]), &set(&["a", "b"])), 1.0);
        assert_eq!(jaccard(&set(&["a"]), &set(&["b"])), 0.0);
        assert_eq!(jaccard(&set(&[]), &set(&[])), 0.0);
        assert_eq!(multiset_jaccard(&["a", "a", "b"], &["a", "b", "b"]), 0.5);
    }

    fn cand(id: usize, score: f64, penalty: f64) -> RankedCandidate {
        RankedCandidate {
            pair_id: id,
            response: format!("r{id}"),
            lead_tokens: vec![format!("r{id}")],
            base_score: score,
            prediction: None,
            penalty,
            rerank_score: score,
        }
    }

    #[test]
    fn top_candidate_moves_to_kth_position() {
        let out = rerank(vec![cand(0, 0.9, 1.0), cand(1, 0.8, 0.0), cand(2, 0.7, 0.0)], 1.0, 3).unwrap();
        let ids: Vec<_> = out.iter().map(|c| c.pair_id).collect();
        assert_eq!(ids, vec![1, 2, 0]);
        assert_eq!(out[2].rerank_score, 0.7);
    }

    #[test]
    fn lambda_zero_and_zero_penalty_are_identity() {
        let list = vec![cand(3, 0.5, 0.9), cand(1, 0.5, 0.0), cand(2, 0.1, 0.4)];
        let ids = |v: Vec<RankedCandidate>| v.iter().map(|c| c.pair_id).collect::<Vec<_>>();
        assert_eq!(ids(rerank(list.clone(), 0.0, 20).unwrap()), vec![3, 1, 2]);
        let clean: Vec<_> = list.iter().map(|c| RankedCandidate { penalty: 0.0, ..c.clone() }).collect();
        assert_eq!(ids(rerank(clean, 5.0, 2).unwrap()), vec![3, 1, 2]);
        assert!(matches!(rerank(vec![], 1.0, 3), Err(RetrieveError::EmptyCandidateList)));
    }

    #[test]
    fn penalty_rules() {
        let pred = Prediction {
            level1: Level1::Interrogative,
            level2: Level2::YesNoIn,
            prob_level1: 0.9,
            prob_level2: 0.6,
        };
        assert_eq!(penalty_for(&pred, TargetFunction::Level1(Level1::Interrogative)), 0.0);
        assert_eq!(penalty_for(&pred, TargetFunction::Level1(Level1::Declarative)), 0.9);
        assert_eq!(penalty_for(&pred, TargetFunction::Level2(SentenceFunction::new(Level2::WhStyleIn))), 0.6);
    }
}
