//! Attention sequence-to-sequence responders.
//!
//! The encoder is a bidirectional GRU over query tokens; the decoder is a
//! GRU whose input at step `t` is `[emb(y_{t-1}); c_t; e_sf]`, where `c_t`
//! attends over encoder states with the previous decoder state and `e_sf`
//! is the embedding of the requested response function (conditioned models
//! only). Output logits read `[s_t; c_t]`.

mod decode;

pub use decode::{BeamOutput, Hypothesis, DEFAULT_BEAM, DEFAULT_MAX_LEN};

use std::path::Path;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::corpus::{build_vocab, Vocabulary};
use crate::corpus::{Corpus, CorpusError, BOS, EOS};
use crate::nncore::ops::add_assign;
use crate::nncore::{
    cross_entropy, fit, read_model_file, softmax, softmax_cross_entropy_grad, write_model_file, Attention,
    AttentionCache, BiGru, BiGruRun, Embedding, FitLog, GruCache, GruCell, Gradients, Linear, ModelFile, NnError,
    ParameterSet, Tensor, TrainConfig,
};
use crate::taxonomy::{Level, TargetFunction};

const KIND: &str = "seq2seq";

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("no training pairs")]
    EmptyCorpus,
    #[error("query has no tokens")]
    EmptyQuery,
    #[error("pair {0} has no response sentence function")]
    MissingSentenceFunction(usize),
    #[error("conditioned model needs a target sentence function")]
    MissingTarget,
    #[error("target `{target}` cannot condition a level-{level} model")]
    LevelMismatch { target: TargetFunction, level: Level },
    #[error("beam width and max length must be positive")]
    InvalidSearch,
    #[error("model metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Sentence-function conditioning of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conditioning {
    pub level: Level,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Net {
    enc_emb: Embedding,
    dec_emb: Embedding,
    encoder: BiGru,
    init: Linear,
    attention: Attention,
    decoder: GruCell,
    out: Linear,
    sf: Option<Embedding>,
    hidden: usize,
    embed: usize,
}

/// Encoder output reused by every decoding step.
pub(crate) struct Encoded {
    run: BiGruRun,
    memory: Vec<Vec<f64>>,
    keys: Vec<Vec<f64>>,
    init_in: Vec<f64>,
    pub(crate) s0: Vec<f64>,
}

struct StepCache {
    att: AttentionCache,
    gru: GruCache,
    out_in: Vec<f64>,
}

struct Sample {
    src: Vec<usize>,
    tgt: Vec<usize>,
    sf: Option<usize>,
}

impl Net {
    fn new(p: &mut ParameterSet, vocab_len: usize, cond: Option<Conditioning>, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Self {
        let (h, e) = (config.hidden_dim, config.embed_dim);
        let d = cond.map_or(0, |c| c.dim);
        let enc_emb = Embedding::new(p, "enc_emb", vocab_len, e, rng);
        let dec_emb = Embedding::new(p, "dec_emb", vocab_len, e, rng);
        let encoder = BiGru::new(p, "enc", e, h, rng);
        let init = Linear::new(p, "init", 2 * h, h, rng);
        let attention = Attention::new(p, "att", h, 2 * h, config.attention_dim, rng);
        let decoder = GruCell::new(p, "dec", e + 2 * h + d, h, rng);
        let out = Linear::new(p, "out", 3 * h, vocab_len, rng);
        let sf = cond.map(|c| Embedding::new(p, "sf_emb", c.level.class_count(), c.dim, rng));
        Net { enc_emb, dec_emb, encoder, init, attention, decoder, out, sf, hidden: h, embed: e }
    }

    pub(crate) fn encode(&self, p: &ParameterSet, src: &[usize]) -> Result<Encoded, NnError> {
        let run = self.encoder.run(p, &self.enc_emb.lookup(p, src))?;
        let memory = run.position_states();
        let keys = self.attention.keys(p, &memory);
        let init_in = run.final_state();
        let s0 = self.init.forward(p, &init_in).into_iter().map(f64::tanh).collect();
        Ok(Encoded { run, memory, keys, init_in, s0 })
    }

    pub(crate) fn sf_vector(&self, p: &ParameterSet, sf: Option<usize>) -> Vec<f64> {
        match (&self.sf, sf) {
            (Some(e), Some(code)) => e.row(p, code).to_vec(),
            _ => Vec::new(),
        }
    }

    /// One decoder step: returns the new state, the logits and the cache.
    fn step(&self, p: &ParameterSet, enc: &Encoded, s_prev: &[f64], y_prev: usize, sf: &[f64]) -> (Vec<f64>, Vec<f64>, StepCache) {
        let (context, att) = self.attention.forward(p, s_prev, &enc.memory, &enc.keys);
        let mut x = Vec::with_capacity(self.decoder.input_dim);
        x.extend_from_slice(self.dec_emb.row(p, y_prev));
        x.extend_from_slice(&context);
        x.extend_from_slice(sf);
        let (s, gru) = self.decoder.step(p, &x, s_prev);
        let mut out_in = s.clone();
        out_in.extend_from_slice(&context);
        let logits = self.out.forward(p, &out_in);
        (s, logits, StepCache { att, gru, out_in })
    }

    /// Decoder state update plus log-probabilities of the next token.
    pub(crate) fn next(&self, p: &ParameterSet, enc: &Encoded, s_prev: &[f64], y_prev: usize, sf: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (s, logits, cache) = self.step(p, enc, s_prev, y_prev, sf);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        (s, logits.iter().map(|v| v - lse).collect(), cache.att.weights)
    }

    /// Teacher-forced loss and gradient for one pair.
    fn grad(&self, p: &ParameterSet, s: &Sample, g: &mut Gradients) -> Result<f64, NnError> {
        let enc = self.encode(p, &s.src)?;
        let sf = self.sf_vector(p, s.sf);
        let inputs: Vec<usize> = std::iter::once(BOS).chain(s.tgt.iter().copied()).collect();
        let targets: Vec<usize> = s.tgt.iter().copied().chain(std::iter::once(EOS)).collect();

        let mut states = vec![enc.s0.clone()];
        let mut caches = Vec::with_capacity(targets.len());
        let mut grads_logits = Vec::with_capacity(targets.len());
        let mut loss = 0.0;
        for (t, (&y_in, &y_out)) in inputs.iter().zip(&targets).enumerate() {
            let (s_new, logits, cache) = self.step(p, &enc, &states[t], y_in, &sf);
            let probs = softmax(&logits)?;
            loss += cross_entropy(&probs, y_out);
            grads_logits.push(softmax_cross_entropy_grad(&probs, y_out));
            caches.push(cache);
            states.push(s_new);
        }

        let (h, e) = (self.hidden, self.embed);
        let mut ds_next = vec![0.0; h];
        let mut dmemory = vec![vec![0.0; 2 * h]; enc.memory.len()];
        let mut dkeys = vec![vec![0.0; self.attention.attn_dim]; enc.memory.len()];
        for t in (0..targets.len()).rev() {
            let c = &caches[t];
            let d_out_in = self.out.backward(p, &c.out_in, &grads_logits[t], g);
            let mut ds = ds_next;
            add_assign(&mut ds, &d_out_in[..h]);
            let mut dc = d_out_in[h..].to_vec();
            let (dx, mut ds_prev) = self.decoder.backward(p, &c.gru, &ds, g);
            self.dec_emb.backward_row(inputs[t], &dx[..e], g);
            add_assign(&mut dc, &dx[e..e + 2 * h]);
            if let (Some(table), Some(code)) = (&self.sf, s.sf) {
                table.backward_row(code, &dx[e + 2 * h..], g);
            }
            let dq = self.attention.backward(p, &c.att, &enc.memory, &dc, g, &mut dkeys, &mut dmemory);
            add_assign(&mut ds_prev, &dq);
            ds_next = ds_prev;
        }
        let dpre: Vec<f64> = ds_next.iter().zip(&enc.s0).map(|(d, s)| d * (1.0 - s * s)).collect();
        let d_final = self.init.backward(p, &enc.init_in, &dpre, g);
        self.attention.keys_backward(p, &enc.memory, &dkeys, g, &mut dmemory);
        let dxs = self.encoder.backward(p, &enc.run, Some(&dmemory), Some(&d_final), g);
        self.enc_emb.backward(&s.src, &dxs, g);
        Ok(loss)
    }
}

/// Attention seq2seq model, optionally conditioned on a sentence function.
#[derive(Debug, Clone)]
pub struct Seq2SeqModel {
    config: TrainConfig,
    vocab: Vocabulary,
    conditioning: Option<Conditioning>,
    params: ParameterSet,
    pub(crate) net: Net,
    log: FitLog,
}

impl Seq2SeqModel {
    pub fn new(vocab: Vocabulary, conditioning: Option<Conditioning>, config: &TrainConfig) -> Result<Self, GenerateError> {
        config.validate()?;
        if conditioning.is_some_and(|c| c.dim == 0) {
            return Err(NnError::InvalidConfig("conditioning dim must be positive".into()).into());
        }
        let mut params = ParameterSet::new();
        let net = Net::new(&mut params, vocab.len(), conditioning, config, &mut config.rng());
        Ok(Seq2SeqModel { config: config.clone(), vocab, conditioning, params, net, log: FitLog::default() })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn conditioning(&self) -> Option<Conditioning> {
        self.conditioning
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn log(&self) -> &FitLog {
        &self.log
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// A conditioned copy whose SF table and extra decoder input weights are
    /// zero, so it decodes exactly like `self` for any target.
    pub fn extend_with_sf_conditioning(&self, level: Level, dim: usize) -> Result<Self, GenerateError> {
        if self.conditioning.is_some() {
            return Err(GenerateError::Meta("model is already conditioned".into()));
        }
        let cond = Conditioning { level, dim };
        let mut model = Seq2SeqModel::new(self.vocab.clone(), Some(cond), &self.config)?;
        for (name, t) in self.params.iter() {
            let value = if name == "dec.w_x" {
                let cols = t.cols();
                let mut data = Vec::with_capacity(t.shape()[0] * (cols + dim));
                for r in 0..t.shape()[0] {
                    data.extend_from_slice(t.row(r));
                    data.extend(std::iter::repeat_n(0.0, dim));
                }
                Tensor::from_vec(&[t.shape()[0], cols + dim], data)?
            } else {
                t.clone()
            };
            model.params.load(name, value)?;
        }
        let id = model.params.id("sf_emb").expect("conditioned model has a table");
        model.params.get_mut(id).fill(0.0);
        Ok(model)
    }

    /// SF code used for `target`, checking it against the model.
    pub(crate) fn sf_code(&self, target: Option<TargetFunction>) -> Result<Option<usize>, GenerateError> {
        let Some(cond) = self.conditioning else { return Ok(None) };
        let target = target.ok_or(GenerateError::MissingTarget)?;
        match (cond.level, target) {
            (Level::One, t) => Ok(Some(t.level1().code())),
            (Level::Two, TargetFunction::Level2(sf)) => Ok(Some(sf.level2().code())),
            (level, target) => Err(GenerateError::LevelMismatch { target, level }),
        }
    }

    pub fn to_model_file(&self) -> ModelFile {
        let meta = serde_json::json!({
            "config": self.config,
            "vocab": self.vocab,
            "conditioning": self.conditioning,
            "log": self.log,
        });
        ModelFile::from_params(KIND, meta, &self.params)
    }

    pub fn from_model_file(file: &ModelFile) -> Result<Self, GenerateError> {
        file.expect_kind(KIND)?;
        let field = |key: &str| {
            file.meta.get(key).cloned().ok_or_else(|| GenerateError::Meta(format!("missing `{key}`")))
        };
        let parse = |key: &str| -> Result<serde_json::Value, GenerateError> { field(key) };
        let config: TrainConfig =
            serde_json::from_value(parse("config")?).map_err(|e| GenerateError::Meta(e.to_string()))?;
        let vocab: Vocabulary = serde_json::from_value(parse("vocab")?).map_err(|e| GenerateError::Meta(e.to_string()))?;
        let cond: Option<Conditioning> =
            serde_json::from_value(parse("conditioning")?).map_err(|e| GenerateError::Meta(e.to_string()))?;
        let mut model = Seq2SeqModel::new(vocab, cond, &config)?;
        model.log = serde_json::from_value(parse("log")?).map_err(|e| GenerateError::Meta(e.to_string()))?;
        file.load_into(&mut model.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), GenerateError> {
        Ok(write_model_file(path, &self.to_model_file())?)
    }

    pub fn load(path: &Path) -> Result<Self, GenerateError> {
        Seq2SeqModel::from_model_file(&read_model_file(path)?)
    }
}

fn train(corpus: &Corpus, conditioning: Option<Conditioning>, config: &TrainConfig) -> Result<Seq2SeqModel, GenerateError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(GenerateError::EmptyCorpus);
    }
    let mut sfs = Vec::with_capacity(corpus.len());
    for (i, pair) in corpus.pairs.iter().enumerate() {
        sfs.push(match conditioning {
            None => None,
            Some(c) => {
                let sf = pair.response_function().ok_or(GenerateError::MissingSentenceFunction(i))?;
                Some(c.level.code_of(sf))
            }
        });
    }
    let vocab = build_vocab(corpus, config.vocab_cap)?;
    let mut model = Seq2SeqModel::new(vocab, conditioning, config)?;
    let samples: Vec<Sample> = corpus
        .pairs
        .iter()
        .zip(sfs)
        .filter(|(p, _)| !p.query_tokens().is_empty())
        .map(|(p, sf)| Sample { src: model.vocab.encode(&p.query_tokens()), tgt: model.vocab.encode(&p.response_tokens()), sf })
        .collect();
    if samples.is_empty() {
        return Err(GenerateError::EmptyCorpus);
    }
    info!("seq2seq: {} pairs, vocabulary {} (coverage {:.4})", samples.len(), model.vocab.len(), model.vocab.coverage());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let Seq2SeqModel { params, net, log, .. } = &mut model;
    *log = fit(params, &samples, config, &mut rng, |p, s, g| net.grad(p, s, g), |_| Ok(None))?;
    info!("seq2seq: best epoch {} loss {:.4}", log.best_epoch, -log.best_score);
    Ok(model)
}

/// Teacher-forced training of the unconditioned baseline. Early stopping
/// watches the training loss.
pub fn train_seq2seq(corpus: &Corpus, config: &TrainConfig) -> Result<Seq2SeqModel, GenerateError> {
    train(corpus, None, config)
}

/// Training of the conditioned model; every pair needs a response function,
/// read at `level`. The SF embedding has `embed_dim` entries.
pub fn train_cseq2seq(corpus: &Corpus, level: Level, config: &TrainConfig) -> Result<Seq2SeqModel, GenerateError> {
    train(corpus, Some(Conditioning { level, dim: config.embed_dim }), config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ConversationPair, Segment};
    use crate::nncore::{finite_difference_check, Evaluation};
    use crate::taxonomy::{parse_label, Level1};

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            hidden_dim: 4,
            embed_dim: 3,
            attention_dim: 3,
            batch_size: 8,
            learning_rate: 0.02,
            ..TrainConfig::desk()
        }
    }

    fn corpus() -> Corpus {
        let sf = parse_label("IN:Yes-no IN").unwrap();
        Corpus::new(
            ["ab", "ba", "abc"]
                .iter()
                .map(|q| ConversationPair {
                    query: vec![Segment::unlabeled(&q.chars().map(|c| format!("{c} ")).collect::<String>())],
                    response: vec![Segment::labeled(&format!("{q}吗"), sf)],
                    source: "t".into(),
                })
                .collect(),
        )
    }

    #[test]
    fn full_model_gradient_check() {
        let c = corpus();
        let vocab = build_vocab(&c, 100).unwrap();
        let mut m = Seq2SeqModel::new(vocab, Some(Conditioning { level: Level::Two, dim: 2 }), &tiny_config()).unwrap();
        let ids: Vec<_> = m.params.ids().collect();
        for id in ids {
            m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 5.0);
        }
        let s = Sample { src: m.vocab.encode(&["a", "b", "c"]), tgt: m.vocab.encode(&["b", "吗"]), sf: Some(6) };
        let mut g = m.params.zero_grads();
        m.net.grad(&m.params, &s, &mut g).unwrap();
        let net = m.net.clone();
        let report = finite_difference_check(&mut m.params, &g, |p| {
            let mut scratch = p.zero_grads();
            Evaluation::smooth(net.grad(p, &s, &mut scratch).unwrap())
        });
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn conditioned_training_requires_functions() {
        let mut c = corpus();
        c.pairs[1].response[0].functions.clear();
        assert!(matches!(
            train_cseq2seq(&c, Level::Two, &tiny_config()),
            Err(GenerateError::MissingSentenceFunction(1))
        ));
        assert!(matches!(train_seq2seq(&Corpus::default(), &tiny_config()), Err(GenerateError::EmptyCorpus)));
    }

    #[test]
    fn target_level_checks() {
        let vocab = build_vocab(&corpus(), 100).unwrap();
        let m = Seq2SeqModel::new(vocab, Some(Conditioning { level: Level::Two, dim: 2 }), &tiny_config()).unwrap();
        assert!(matches!(m.sf_code(None), Err(GenerateError::MissingTarget)));
        assert!(matches!(
            m.sf_code(Some(TargetFunction::Level1(Level1::Imperative))),
            Err(GenerateError::LevelMismatch { .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let m = train_seq2seq(&corpus(), &TrainConfig { max_epochs: 2, ..tiny_config() }).unwrap();
        let back = Seq2SeqModel::from_model_file(&m.to_model_file()).unwrap();
        assert!(back.params.iter().eq(m.params.iter()));
        assert_eq!(back.log, m.log);
        assert_eq!(back.greedy(&["a", "b"], None, 5).unwrap(), m.greedy(&["a", "b"], None, 5).unwrap());
    }
}
