use std::path::Path;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{accuracy_of, meta_field, split_indices, ClassifyError, TaxonomyCodes, TextEncoder};
use crate::corpus::{ConversationPair, Corpus, Vocabulary};
use crate::nncore::ops::{add_assign, argmax};
use crate::nncore::{
    cross_entropy, fit, read_model_file, softmax, softmax_cross_entropy_grad, write_model_file, Embedding,
    EncoderKind, FitLog, Gradients, Linear, ModelFile, NnError, ParameterSet, TrainConfig,
};
use crate::taxonomy::{Level, Level1, Level2, SentenceFunction, TargetFunction};

const KIND: &str = "cft";

/// Predicted response-function distributions at both levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSfDistribution {
    pub level1: Vec<f64>,
    pub level2: Vec<f64>,
}

impl ResponseSfDistribution {
    pub fn at(&self, level: Level) -> &[f64] {
        match level {
            Level::One => &self.level1,
            Level::Two => &self.level2,
        }
    }

    /// Argmax at `level`, the target function handed to response models.
    pub fn target(&self, level: Level) -> TargetFunction {
        TargetFunction::from_code(level, argmax(self.at(level))).expect("head size matches taxonomy")
    }
}

#[derive(Debug, Clone)]
struct CftNet {
    text: TextEncoder,
    sf_embed: Option<Embedding>,
    head1: Linear,
    head2: Linear,
}

struct Sample {
    ids: Vec<usize>,
    sfs: Vec<usize>,
    l1: usize,
    l2: usize,
}

impl CftNet {
    fn new(p: &mut ParameterSet, vocab_len: usize, kind: EncoderKind, with_sf: bool, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = config.hidden_dim;
        let text = TextEncoder::new(p, vocab_len, kind, config, rng);
        let sf_embed = with_sf.then(|| Embedding::new(p, "sf_emb", Level2::COUNT, h, rng));
        CftNet {
            text,
            sf_embed,
            head1: Linear::new(p, "head1", h, Level1::COUNT, rng),
            head2: Linear::new(p, "head2", h, Level2::COUNT, rng),
        }
    }

    /// Sentence vector plus the summed query-function embeddings.
    fn represent(&self, p: &ParameterSet, ids: &[usize], sfs: &[usize]) -> Result<(Vec<f64>, crate::nncore::EncoderCache), NnError> {
        let (mut v, cache) = self.text.forward(p, ids)?;
        if let Some(e) = &self.sf_embed {
            for &sf in sfs {
                add_assign(&mut v, e.row(p, sf));
            }
        }
        Ok((v, cache))
    }

    fn distributions(&self, p: &ParameterSet, ids: &[usize], sfs: &[usize]) -> Result<ResponseSfDistribution, NnError> {
        let (v, _) = self.represent(p, ids, sfs)?;
        Ok(ResponseSfDistribution {
            level1: softmax(&self.head1.forward(p, &v))?,
            level2: softmax(&self.head2.forward(p, &v))?,
        })
    }

    fn grad(&self, p: &ParameterSet, s: &Sample, g: &mut Gradients) -> Result<f64, NnError> {
        let (v, cache) = self.represent(p, &s.ids, &s.sfs)?;
        let p1 = softmax(&self.head1.forward(p, &v))?;
        let p2 = softmax(&self.head2.forward(p, &v))?;
        let loss = cross_entropy(&p1, s.l1) + cross_entropy(&p2, s.l2);
        let mut dv = self.head1.backward(p, &v, &softmax_cross_entropy_grad(&p1, s.l1), g);
        add_assign(&mut dv, &self.head2.backward(p, &v, &softmax_cross_entropy_grad(&p2, s.l2), g));
        if let Some(e) = &self.sf_embed {
            for &sf in &s.sfs {
                e.backward_row(sf, &dv, g);
            }
        }
        self.text.backward(p, &s.ids, &cache, &dv, g);
        Ok(loss)
    }
}

/// Response-function predictor.
#[derive(Debug, Clone)]
pub struct CftModel {
    config: TrainConfig,
    encoder: EncoderKind,
    with_query_sf: bool,
    vocab: Vocabulary,
    params: ParameterSet,
    net: CftNet,
    log: FitLog,
}

impl CftModel {
    pub fn new(vocab: Vocabulary, encoder: EncoderKind, with_query_sf: bool, config: &TrainConfig) -> Result<Self, ClassifyError> {
        config.validate()?;
        let mut params = ParameterSet::new();
        let net = CftNet::new(&mut params, vocab.len(), encoder, with_query_sf, config, &mut config.rng());
        Ok(CftModel { config: config.clone(), encoder, with_query_sf, vocab, params, net, log: FitLog::default() })
    }

    pub fn with_query_sf(&self) -> bool {
        self.with_query_sf
    }

    pub fn encoder(&self) -> EncoderKind {
        self.encoder
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

    /// Distributions over the response function. `query_sfs` is ignored by
    /// models trained without query functions.
    pub fn predict_response_sf<S: AsRef<str>>(
        &self,
        query_tokens: &[S],
        query_sfs: &[SentenceFunction],
    ) -> Result<ResponseSfDistribution, ClassifyError> {
        if query_tokens.is_empty() {
            return Err(ClassifyError::EmptyQuery);
        }
        let ids = self.vocab.encode(query_tokens);
        let sfs: Vec<usize> = query_sfs.iter().map(|sf| sf.level2().code()).collect();
        Ok(self.net.distributions(&self.params, &ids, &sfs)?)
    }

    /// Uses the pair's query tokens and the primary labels of its query
    /// segments.
    pub fn predict_pair(&self, pair: &ConversationPair) -> Result<ResponseSfDistribution, ClassifyError> {
        let sfs: Vec<SentenceFunction> = pair.query.iter().filter_map(|s| s.primary()).collect();
        self.predict_response_sf(&pair.query_tokens(), &sfs)
    }

    pub fn to_model_file(&self) -> ModelFile {
        let meta = serde_json::json!({
            "config": self.config,
            "encoder": self.encoder,
            "with_query_sf": self.with_query_sf,
            "taxonomy": TaxonomyCodes::current(),
            "vocab": self.vocab,
            "log": self.log,
        });
        ModelFile::from_params(KIND, meta, &self.params)
    }

    pub fn from_model_file(file: &ModelFile) -> Result<Self, ClassifyError> {
        file.expect_kind(KIND)?;
        meta_field::<TaxonomyCodes>(&file.meta, "taxonomy")?.check()?;
        let config: TrainConfig = meta_field(&file.meta, "config")?;
        let mut model = CftModel::new(
            meta_field(&file.meta, "vocab")?,
            meta_field(&file.meta, "encoder")?,
            meta_field(&file.meta, "with_query_sf")?,
            &config,
        )?;
        model.log = meta_field(&file.meta, "log")?;
        file.load_into(&mut model.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifyError> {
        Ok(write_model_file(path, &self.to_model_file())?)
    }

    pub fn load(path: &Path) -> Result<Self, ClassifyError> {
        CftModel::from_model_file(&read_model_file(path)?)
    }
}

/// Trains both heads jointly. The target of each pair is the primary label
/// of its first response segment; pairs without one are skipped.
pub fn train_cft(corpus: &Corpus, with_query_sf: bool, encoder: EncoderKind, config: &TrainConfig) -> Result<CftModel, ClassifyError> {
    config.validate()?;
    let usable: Vec<&ConversationPair> = corpus
        .pairs
        .iter()
        .filter(|p| p.response_function().is_some() && !p.query_tokens().is_empty())
        .collect();
    if usable.len() < corpus.len() {
        warn!("cft: skipped {} pairs without a labeled response or query text", corpus.len() - usable.len());
    }
    if usable.is_empty() {
        return Err(ClassifyError::EmptyCorpus);
    }
    let query_tokens: Vec<Vec<String>> = usable.iter().map(|p| p.query_tokens()).collect();
    let vocab = Vocabulary::build(query_tokens.iter().map(Vec::as_slice), config.vocab_cap)?;
    let mut model = CftModel::new(vocab, encoder, with_query_sf, config)?;
    let all: Vec<Sample> = usable
        .iter()
        .zip(&query_tokens)
        .map(|(p, toks)| {
            let target = p.response_function().expect("filtered above");
            Sample {
                ids: model.vocab.encode(toks),
                sfs: p.query.iter().filter_map(|s| s.primary()).map(|sf| sf.level2().code()).collect(),
                l1: target.level1().code(),
                l2: target.level2().code(),
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let (train_idx, val_idx) = split_indices(all.len(), config.validation_fraction, &mut rng);
    let mut slots: Vec<Option<Sample>> = all.into_iter().map(Some).collect();
    let train: Vec<Sample> = train_idx.iter().map(|&i| slots[i].take().expect("unique")).collect();
    let val: Vec<Sample> = val_idx.iter().map(|&i| slots[i].take().expect("unique")).collect();
    info!("cft: {} training and {} validation pairs", train.len(), val.len());

    let CftModel { params, net, log, .. } = &mut model;
    *log = fit(
        params,
        &train,
        config,
        &mut rng,
        |p, s, g| net.grad(p, s, g),
        |p| {
            // Mean of level-1 and level-2 accuracy.
            let hits = val
                .iter()
                .map(|s| {
                    let d = net.distributions(p, &s.ids, &s.sfs)?;
                    Ok([argmax(&d.level1) == s.l1, argmax(&d.level2) == s.l2])
                })
                .collect::<Result<Vec<_>, NnError>>()?;
            Ok(accuracy_of(hits.into_iter().flatten()))
        },
    )?;
    info!("cft: best epoch {} score {:.4}", log.best_epoch, log.best_score);
    Ok(model)
}
