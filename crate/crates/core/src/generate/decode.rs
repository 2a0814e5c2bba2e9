//! Greedy and beam decoding.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{GenerateError, Seq2SeqModel};
use crate::corpus::{BOS, EOS, PAD};
use crate::nncore::ops::argmax;
use crate::taxonomy::TargetFunction;

pub const DEFAULT_BEAM: usize = 5;
pub const DEFAULT_MAX_LEN: usize = 30;

/// A decoded token sequence. `tokens` excludes the end marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub words: Vec<String>,
    pub log_prob: f64,
    /// Whether the end marker was emitted before the length limit.
    pub finished: bool,
}

impl Hypothesis {
    /// Emitted length, counting the end marker.
    pub fn length(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    /// Length-normalised log-probability.
    pub fn score(&self) -> f64 {
        match self.length() {
            0 => 0.0,
            n => self.log_prob / n as f64,
        }
    }

    pub fn text(&self) -> String {
        crate::corpus::detokenize(&self.words)
    }

    fn emitted(&self) -> impl Iterator<Item = usize> + '_ {
        self.tokens.iter().copied().chain(self.finished.then_some(EOS))
    }
}

/// Highest normalised score first; ties go to the lexicographically smaller
/// token sequence.
fn by_score(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score().total_cmp(&a.score()).then_with(|| a.emitted().cmp(b.emitted()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamOutput {
    /// Finished hypotheses, best first.
    pub nbest: Vec<Hypothesis>,
}

impl BeamOutput {
    pub fn best(&self) -> &Hypothesis {
        &self.nbest[0]
    }
}

struct Live {
    tokens: Vec<usize>,
    log_prob: f64,
    state: Vec<f64>,
}

fn mask(log_probs: &mut [f64]) {
    for id in [PAD, BOS] {
        if let Some(v) = log_probs.get_mut(id) {
            *v = f64::NEG_INFINITY;
        }
    }
}

impl Seq2SeqModel {
    fn prepare<S: AsRef<str>>(
        &self,
        query: &[S],
        target: Option<TargetFunction>,
        max_len: usize,
    ) -> Result<(super::Encoded, Vec<f64>), GenerateError> {
        if max_len == 0 {
            return Err(GenerateError::InvalidSearch);
        }
        if query.is_empty() {
            return Err(GenerateError::EmptyQuery);
        }
        let code = self.sf_code(target)?;
        let ids = self.vocab().encode(query);
        let enc = self.net.encode(self.params(), &ids)?;
        Ok((enc, self.net.sf_vector(self.params(), code)))
    }

    fn hypothesis(&self, tokens: Vec<usize>, log_prob: f64, finished: bool) -> Hypothesis {
        let words = tokens.iter().map(|&t| self.vocab().token(t).to_string()).collect();
        Hypothesis { tokens, words, log_prob, finished }
    }

    /// Greedy decoding; also returns the attention weights of every step.
    pub fn greedy_with_attention<S: AsRef<str>>(
        &self,
        query: &[S],
        target: Option<TargetFunction>,
        max_len: usize,
    ) -> Result<(Hypothesis, Vec<Vec<f64>>), GenerateError> {
        let (enc, sf) = self.prepare(query, target, max_len)?;
        let mut state = enc.s0.clone();
        let (mut prev, mut tokens, mut log_prob) = (BOS, Vec::new(), 0.0);
        let mut weights = Vec::new();
        for _ in 0..max_len {
            let (s, mut lp, w) = self.net.next(self.params(), &enc, &state, prev, &sf);
            weights.push(w);
            mask(&mut lp);
            let y = argmax(&lp);
            log_prob += lp[y];
            if y == EOS {
                return Ok((self.hypothesis(tokens, log_prob, true), weights));
            }
            tokens.push(y);
            state = s;
            prev = y;
        }
        Ok((self.hypothesis(tokens, log_prob, false), weights))
    }

    /// Greedy decoding; ties between tokens go to the lower id.
    pub fn greedy<S: AsRef<str>>(
        &self,
        query: &[S],
        target: Option<TargetFunction>,
        max_len: usize,
    ) -> Result<Hypothesis, GenerateError> {
        Ok(self.greedy_with_attention(query, target, max_len)?.0)
    }

    /// Beam search over unnormalised log-probabilities, ranking finished
    /// hypotheses by length-normalised score. The greedy hypothesis is
    /// always in the final pool, so the best beam score is at least the
    /// greedy score.
    pub fn beam_search<S: AsRef<str>>(
        &self,
        query: &[S],
        target: Option<TargetFunction>,
        width: usize,
        max_len: usize,
    ) -> Result<BeamOutput, GenerateError> {
        if width == 0 {
            return Err(GenerateError::InvalidSearch);
        }
        let greedy = self.greedy(query, target, max_len)?;
        let (enc, sf) = self.prepare(query, target, max_len)?;
        let mut finished = vec![greedy];
        let mut live = vec![Live { tokens: Vec::new(), log_prob: 0.0, state: enc.s0.clone() }];
        for _ in 0..max_len {
            if live.is_empty() {
                break;
            }
            let mut expansions: Vec<(f64, Vec<usize>, usize, usize)> = Vec::new();
            let mut states = Vec::with_capacity(live.len());
            for (h, hyp) in live.iter().enumerate() {
                let prev = hyp.tokens.last().copied().unwrap_or(BOS);
                let (s, mut lp, _) = self.net.next(self.params(), &enc, &hyp.state, prev, &sf);
                mask(&mut lp);
                for (y, v) in lp.iter().enumerate() {
                    if v.is_finite() {
                        let mut seq = hyp.tokens.clone();
                        seq.push(y);
                        expansions.push((hyp.log_prob + v, seq, h, y));
                    }
                }
                states.push(s);
            }
            expansions.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
            expansions.truncate(width);
            let mut next = Vec::with_capacity(width);
            for (log_prob, mut seq, h, y) in expansions {
                if y == EOS {
                    seq.pop();
                    finished.push(self.hypothesis(seq, log_prob, true));
                } else {
                    next.push(Live { tokens: seq, log_prob, state: states[h].clone() });
                }
            }
            live = next;
        }
        finished.extend(live.into_iter().map(|h| self.hypothesis(h.tokens, h.log_prob, false)));
        finished.sort_by(by_score);
        finished.dedup_by(|a, b| a.tokens == b.tokens && a.finished == b.finished);
        Ok(BeamOutput { nbest: finished })
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_config;
    use super::super::*;
    use crate::corpus::{ConversationPair, Segment, BOS, EOS, PAD};
    use crate::taxonomy::parse_label;

    fn model(cond: bool) -> Seq2SeqModel {
        let c = Corpus::new(vec![ConversationPair {
            query: vec![Segment::unlabeled("x y z")],
            response: vec![Segment::labeled("y z", parse_label("DE:Positive DE").unwrap())],
            source: "t".into(),
        }]);
        let vocab = build_vocab(&c, 100).unwrap();
        let cond = cond.then_some(Conditioning { level: Level::Two, dim: 2 });
        Seq2SeqModel::new(vocab, cond, &tiny_config()).unwrap()
    }

    #[test]
    fn beam_one_equals_greedy() {
        let m = model(false);
        let g = m.greedy(&["x", "y"], None, 6).unwrap();
        let b = m.beam_search(&["x", "y"], None, 1, 6).unwrap();
        assert_eq!(b.best().tokens, g.tokens);
        assert_eq!(b.best().log_prob, g.log_prob);
    }

    #[test]
    fn beam_not_worse_than_greedy() {
        let m = model(false);
        let g = m.greedy(&["z"], None, 8).unwrap();
        for width in 1..=4 {
            let b = m.beam_search(&["z"], None, width, 8).unwrap();
            assert!(b.best().score() >= g.score());
            assert!(b.nbest.windows(2).all(|w| w[0].score() >= w[1].score()));
        }
    }

    #[test]
    fn attention_is_distribution_and_lengths_bounded() {
        let m = model(false);
        let (h, w) = m.greedy_with_attention(&["x", "y", "z"], None, 5).unwrap();
        assert!(h.tokens.len() <= 5);
        for step in &w {
            assert_eq!(step.len(), 3);
            assert!((step.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(h.tokens.iter().all(|&t| t != PAD && t != BOS && t != EOS));
    }

    #[test]
    fn zero_conditioning_matches_baseline() {
        let base = model(false);
        let ext = base.extend_with_sf_conditioning(Level::Two, 3).unwrap();
        let sf = Some(TargetFunction::Level2(parse_label("IM:Request").unwrap()));
        let a = base.beam_search(&["x", "y"], None, 3, 6).unwrap();
        let b = ext.beam_search(&["x", "y"], sf, 3, 6).unwrap();
        assert_eq!(a, b);
        assert!(matches!(ext.greedy(&["x"], None, 3), Err(GenerateError::MissingTarget)));
    }

    #[test]
    fn invalid_search_arguments() {
        let m = model(true);
        let sf = Some(TargetFunction::Level2(parse_label("IM:Request").unwrap()));
        assert!(matches!(m.greedy(&["x"], sf, 0), Err(GenerateError::InvalidSearch)));
        assert!(matches!(m.beam_search(&["x"], sf, 0, 3), Err(GenerateError::InvalidSearch)));
        assert!(matches!(m.greedy::<&str>(&[], sf, 3), Err(GenerateError::EmptyQuery)));
    }
}
