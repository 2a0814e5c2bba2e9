use std::io::{BufRead, Write};
use std::path::Path;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{accuracy_of, meta_field, split_indices, ClassifyError, Prediction, Setup, TaxonomyCodes, TextEncoder};
use crate::corpus::{Confidence, Corpus, CorpusReader, CorpusWriter, Segment, Vocabulary};
use crate::nncore::{
    cross_entropy, fit, read_model_file, softmax, softmax_cross_entropy_grad, write_model_file, Embedding,
    EncoderKind, FitLog, Gradients, Linear, ModelFile, NnError, ParameterSet, TrainConfig,
};
use crate::nncore::ops::{add_assign, argmax};
use crate::taxonomy::{Level1, Level2};

const KIND: &str = "cfm";

/// Training history of both phases.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CfmLog {
    pub level1: FitLog,
    pub level2: FitLog,
}

#[derive(Debug, Clone)]
struct CfmNet {
    text: TextEncoder,
    head1: Linear,
    l1_embed: Embedding,
    head2: Linear,
}

struct Sample {
    ids: Vec<usize>,
    l1: usize,
    l2: usize,
    /// Level-1 label predicted by the converged level-1 model.
    pred_l1: usize,
}

impl CfmNet {
    fn new(p: &mut ParameterSet, vocab_len: usize, kind: EncoderKind, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = config.hidden_dim;
        CfmNet {
            text: TextEncoder::new(p, vocab_len, kind, config, rng),
            head1: Linear::new(p, "head1", h, Level1::COUNT, rng),
            l1_embed: Embedding::new(p, "l1_emb", Level1::COUNT, h, rng),
            head2: Linear::new(p, "head2", h, Level2::COUNT, rng),
        }
    }

    fn vector(&self, p: &ParameterSet, ids: &[usize]) -> Result<Vec<f64>, ClassifyError> {
        if ids.is_empty() {
            return Err(ClassifyError::EmptySegment);
        }
        Ok(self.text.forward(p, ids)?.0)
    }

    fn level1(&self, p: &ParameterSet, v: &[f64]) -> Result<Vec<f64>, NnError> {
        softmax(&self.head1.forward(p, v))
    }

    fn level2(&self, p: &ParameterSet, v: &[f64], l1: usize) -> Result<Vec<f64>, NnError> {
        let mut u = v.to_vec();
        add_assign(&mut u, self.l1_embed.row(p, l1));
        softmax(&self.head2.forward(p, &u))
    }

    fn predict(&self, p: &ParameterSet, ids: &[usize]) -> Result<Prediction, ClassifyError> {
        let v = self.vector(p, ids)?;
        let p1 = self.level1(p, &v)?;
        let l1 = argmax(&p1);
        let p2 = self.level2(p, &v, l1)?;
        let l2 = argmax(&p2);
        Ok(Prediction {
            level1: Level1::from_code(l1).expect("head size matches taxonomy"),
            level2: Level2::from_code(l2).expect("head size matches taxonomy"),
            prob_level1: p1[l1],
            prob_level2: p2[l2],
        })
    }

    /// Accumulates the gradient of CE1 (and CE2 when `with_level2`).
    fn grad(&self, p: &ParameterSet, s: &Sample, g: &mut Gradients, with_level2: bool) -> Result<f64, NnError> {
        let (v, cache) = self.text.forward(p, &s.ids)?;
        let p1 = self.level1(p, &v)?;
        let mut loss = cross_entropy(&p1, s.l1);
        let mut dv = self.head1.backward(p, &v, &softmax_cross_entropy_grad(&p1, s.l1), g);
        if with_level2 {
            let mut u = v.clone();
            add_assign(&mut u, self.l1_embed.row(p, s.pred_l1));
            let p2 = softmax(&self.head2.forward(p, &u))?;
            loss += cross_entropy(&p2, s.l2);
            let du = self.head2.backward(p, &u, &softmax_cross_entropy_grad(&p2, s.l2), g);
            self.l1_embed.backward_row(s.pred_l1, &du, g);
            add_assign(&mut dv, &du);
        }
        self.text.backward(p, &s.ids, &cache, &dv, g);
        Ok(loss)
    }
}

/// Hierarchical segment classifier.
#[derive(Debug, Clone)]
pub struct CfmModel {
    config: TrainConfig,
    encoder: EncoderKind,
    setup: Setup,
    vocab: Vocabulary,
    params: ParameterSet,
    net: CfmNet,
    log: CfmLog,
}

impl CfmModel {
    /// Untrained model with uniformly initialised parameters.
    pub fn new(vocab: Vocabulary, encoder: EncoderKind, setup: Setup, config: &TrainConfig) -> Result<Self, ClassifyError> {
        config.validate()?;
        let mut params = ParameterSet::new();
        let net = CfmNet::new(&mut params, vocab.len(), encoder, config, &mut config.rng());
        Ok(CfmModel { config: config.clone(), encoder, setup, vocab, params, net, log: CfmLog::default() })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn encoder(&self) -> EncoderKind {
        self.encoder
    }

    pub fn setup(&self) -> Setup {
        self.setup
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn log(&self) -> &CfmLog {
        &self.log
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Level-1 distribution `Softmax(FC(v_x))`.
    pub fn predict_level1<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<f64>, ClassifyError> {
        let v = self.net.vector(&self.params, &self.vocab.encode(tokens))?;
        Ok(self.net.level1(&self.params, &v)?)
    }

    /// Level-2 distribution `Softmax(FC(v_x + e[d_l1]))`.
    pub fn predict_level2<S: AsRef<str>>(&self, tokens: &[S], d_l1: Level1) -> Result<Vec<f64>, ClassifyError> {
        let v = self.net.vector(&self.params, &self.vocab.encode(tokens))?;
        Ok(self.net.level2(&self.params, &v, d_l1.code())?)
    }

    /// Level-1 argmax, then level-2 argmax given that level-1 label.
    pub fn predict_sf<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Prediction, ClassifyError> {
        self.net.predict(&self.params, &self.vocab.encode(tokens))
    }

    pub fn predict_segment(&self, segment: &Segment) -> Result<Prediction, ClassifyError> {
        self.predict_sf(&segment.tokens)
    }

    pub fn to_model_file(&self) -> ModelFile {
        let meta = serde_json::json!({
            "config": self.config,
            "encoder": self.encoder,
            "setup": self.setup,
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
        let mut model = CfmModel::new(
            meta_field(&file.meta, "vocab")?,
            meta_field(&file.meta, "encoder")?,
            meta_field(&file.meta, "setup")?,
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
        CfmModel::from_model_file(&read_model_file(path)?)
    }
}

/// Trains the hierarchical classifier in two phases. The level-1 head is
/// trained to convergence first; the level-2 head is then trained jointly
/// with the rest of the network, reading the level-1 embedding of the label
/// predicted by the converged level-1 model.
pub fn train_cfm(corpus: &Corpus, setup: Setup, encoder: EncoderKind, config: &TrainConfig) -> Result<CfmModel, ClassifyError> {
    config.validate()?;
    let mut segments: Vec<&Segment> = Vec::new();
    for pair in &corpus.pairs {
        if matches!(setup, Setup::Query | Setup::Joint) {
            segments.extend(&pair.query);
        }
        if matches!(setup, Setup::Response | Setup::Joint) {
            segments.extend(&pair.response);
        }
    }
    if segments.is_empty() {
        return Err(ClassifyError::EmptyCorpus);
    }
    if let Some(s) = segments.iter().find(|s| s.primary().is_none()) {
        return Err(ClassifyError::UnlabeledSegment(s.text.clone()));
    }
    if segments.iter().any(|s| s.tokens.is_empty()) {
        return Err(ClassifyError::EmptySegment);
    }

    let vocab = Vocabulary::build(segments.iter().map(|s| s.tokens.as_slice()), config.vocab_cap)?;
    let mut model = CfmModel::new(vocab, encoder, setup, config)?;
    let all: Vec<Sample> = segments
        .iter()
        .map(|s| {
            let sf = s.primary().expect("checked above");
            Sample { ids: model.vocab.encode(&s.tokens), l1: sf.level1().code(), l2: sf.level2().code(), pred_l1: 0 }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let (train_idx, val_idx) = split_indices(all.len(), config.validation_fraction, &mut rng);
    let mut slots: Vec<Option<Sample>> = all.into_iter().map(Some).collect();
    let mut train: Vec<Sample> = train_idx.iter().map(|&i| slots[i].take().expect("unique")).collect();
    let val: Vec<Sample> = val_idx.iter().map(|&i| slots[i].take().expect("unique")).collect();
    info!("cfm: {} training and {} validation segments", train.len(), val.len());

    let CfmModel { params, net, log, .. } = &mut model;
    log.level1 = fit(
        params,
        &train,
        config,
        &mut rng,
        |p, s, g| net.grad(p, s, g, false),
        |p| {
            let hits: Result<Vec<bool>, ClassifyError> =
                val.iter().map(|s| Ok(argmax(&net.level1(p, &net.vector(p, &s.ids)?)?) == s.l1)).collect();
            Ok(accuracy_of(hits.map_err(nn_error)?.into_iter()))
        },
    )?;
    info!("cfm level 1: best epoch {} score {:.4}", log.level1.best_epoch, log.level1.best_score);

    for s in &mut train {
        let v = net.vector(params, &s.ids)?;
        s.pred_l1 = argmax(&net.level1(params, &v)?);
    }

    log.level2 = fit(
        params,
        &train,
        config,
        &mut rng,
        |p, s, g| net.grad(p, s, g, true),
        |p| {
            let hits: Result<Vec<bool>, ClassifyError> =
                val.iter().map(|s| Ok(net.predict(p, &s.ids)?.level2.code() == s.l2)).collect();
            Ok(accuracy_of(hits.map_err(nn_error)?.into_iter()))
        },
    )?;
    info!("cfm level 2: best epoch {} score {:.4}", log.level2.best_epoch, log.level2.best_score);
    Ok(model)
}

fn nn_error(e: ClassifyError) -> NnError {
    match e {
        ClassifyError::Nn(e) => e,
        other => NnError::InvalidConfig(other.to_string()),
    }
}

/// Tags every segment with the model's prediction, one record at a time.
/// Returns the number of records written.
pub fn annotate_corpus<R: BufRead, W: Write>(
    model: &CfmModel,
    reader: CorpusReader<R>,
    mut writer: CorpusWriter<W>,
) -> Result<usize, ClassifyError> {
    let mut count = 0;
    for (index, pair) in reader.enumerate() {
        let wrap = |e: ClassifyError| ClassifyError::Record { index, source: Box::new(e) };
        let mut pair = pair.map_err(|e| wrap(e.into()))?;
        for seg in pair.query.iter_mut().chain(pair.response.iter_mut()) {
            let pred = model.predict_segment(seg).map_err(wrap)?;
            seg.functions = vec![pred.function()];
            seg.confidence = Some(Confidence { level1: pred.prob_level1, level2: pred.prob_level2 });
        }
        writer.write(&pair).map_err(|e| wrap(e.into()))?;
        count += 1;
    }
    writer.finish()?;
    Ok(count)
}

pub fn annotate_corpus_file(model: &CfmModel, input: &Path, output: &Path) -> Result<usize, ClassifyError> {
    annotate_corpus(model, CorpusReader::open(input)?, CorpusWriter::create(output)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ConversationPair;
    use crate::taxonomy::{parse_label, SentenceFunction};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            hidden_dim: 8,
            embed_dim: 6,
            batch_size: 4,
            learning_rate: 0.02,
            max_epochs: 30,
            cnn_filters: 4,
            attention_dim: 4,
            ..TrainConfig::desk()
        }
    }

    fn labeled_pair(q: &str, qsf: &str, r: &str, rsf: &str) -> ConversationPair {
        ConversationPair {
            query: vec![Segment::labeled(q, parse_label(qsf).unwrap())],
            response: vec![Segment::labeled(r, parse_label(rsf).unwrap())],
            source: "test".into(),
        }
    }

    fn toy_corpus() -> Corpus {
        let mut pairs = Vec::new();
        for w in ["猫", "狗", "鱼", "鸟", "马", "牛"] {
            pairs.push(labeled_pair(&format!("{w}吗?"), "IN:Yes-no IN", &format!("我喜欢{w}。"), "DE:Positive DE"));
            pairs.push(labeled_pair(&format!("为什么{w}?"), "IN:Wh-style IN", &format!("请{w}。"), "IM:IM with request"));
        }
        Corpus::new(pairs)
    }

    #[test]
    fn zero_head_gives_uniform_level1() {
        let c = toy_corpus();
        let vocab = crate::corpus::build_vocab(&c, 100).unwrap();
        let mut m = CfmModel::new(vocab, EncoderKind::Rnn, Setup::Joint, &tiny_config()).unwrap();
        for name in ["head1.w", "head1.b"] {
            let id = m.params().id(name).unwrap();
            m.params_mut().get_mut(id).fill(0.0);
        }
        let p = m.predict_level1(&["猫", "吗"]).unwrap();
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn level2_depends_on_level1_input() {
        let c = toy_corpus();
        let vocab = crate::corpus::build_vocab(&c, 100).unwrap();
        let m = CfmModel::new(vocab, EncoderKind::Cnn, Setup::Joint, &tiny_config()).unwrap();
        let a = m.predict_level2(&["猫"], Level1::Declarative).unwrap();
        let b = m.predict_level2(&["猫"], Level1::Interrogative).unwrap();
        assert_ne!(a, b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_segment_and_corpus_errors() {
        let c = toy_corpus();
        let vocab = crate::corpus::build_vocab(&c, 100).unwrap();
        let m = CfmModel::new(vocab, EncoderKind::Rnn, Setup::Joint, &tiny_config()).unwrap();
        let none: [&str; 0] = [];
        assert!(matches!(m.predict_sf(&none), Err(ClassifyError::EmptySegment)));
        assert!(matches!(
            train_cfm(&Corpus::default(), Setup::Joint, EncoderKind::Rnn, &tiny_config()),
            Err(ClassifyError::EmptyCorpus)
        ));
        let mut c = toy_corpus();
        c.pairs[0].response[0].functions.clear();
        assert!(matches!(
            train_cfm(&c, Setup::Joint, EncoderKind::Rnn, &tiny_config()),
            Err(ClassifyError::UnlabeledSegment(_))
        ));
        // The query-only setup never looks at the unlabeled response.
        assert!(train_cfm(&c, Setup::Query, EncoderKind::Cnn, &TrainConfig { max_epochs: 1, ..tiny_config() }).is_ok());
    }

    #[test]
    fn learns_toy_corpus_and_round_trips() {
        let c = toy_corpus();
        let config = TrainConfig { validation_fraction: 0.0, ..tiny_config() };
        let m = train_cfm(&c, Setup::Joint, EncoderKind::Rnn, &config).unwrap();
        let p = m.predict_sf(&["鱼", "吗", "?"]).unwrap();
        assert_eq!(p.level1, Level1::Interrogative);
        assert_eq!(p.function(), SentenceFunction::new(Level2::YesNoIn));
        assert!((0.0..=1.0).contains(&p.prob_level1) && (0.0..=1.0).contains(&p.prob_level2));

        let file = m.to_model_file();
        let back = CfmModel::from_model_file(&file).unwrap();
        assert_eq!(back.predict_sf(&["鱼", "吗", "?"]).unwrap(), p);
        let mut a = Vec::new();
        let mut b = Vec::new();
        file.write_to(&mut a).unwrap();
        back.to_model_file().write_to(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_class_corpus_is_trivial() {
        let pairs = (0..6)
            .map(|i| labeled_pair(&format!("{i}吗?"), "IN:Yes-no IN", &format!("{i}吗?"), "IN:Yes-no IN"))
            .collect();
        let config = TrainConfig { validation_fraction: 0.0, max_epochs: 60, patience: 60, ..tiny_config() };
        let m = train_cfm(&Corpus::new(pairs), Setup::Joint, EncoderKind::Cnn, &config).unwrap();
        let last = m.log().level2.epochs.last().unwrap();
        assert!(last.train_loss < 0.05, "{last:?}");
        assert_eq!(m.predict_sf(&["9", "吗"]).unwrap().level2, Level2::YesNoIn);
    }

    #[test]
    fn annotation_preserves_record_count() {
        let m = CfmModel::new(crate::corpus::build_vocab(&toy_corpus(), 100).unwrap(), EncoderKind::Cnn, Setup::Joint, &tiny_config())
            .unwrap();
        let mut input = Vec::new();
        let mut raw = toy_corpus();
        raw.pairs.iter_mut().flat_map(|p| p.query.iter_mut().chain(p.response.iter_mut())).for_each(|s| s.functions.clear());
        crate::corpus::write_corpus(&raw, &mut input).unwrap();
        let mut out = Vec::new();
        let n = annotate_corpus(&m, CorpusReader::new(&input[..]).unwrap(), CorpusWriter::new(&mut out).unwrap()).unwrap();
        assert_eq!(n, raw.len());
        let labeled = crate::corpus::read_corpus(&out[..]).unwrap();
        assert_eq!(labeled.len(), raw.len());
        assert!(labeled.pairs.iter().all(|p| p.all_labeled()));

        let mut empty = Vec::new();
        crate::corpus::write_corpus(&Corpus::default(), &mut empty).unwrap();
        let mut out = Vec::new();
        let n = annotate_corpus(&m, CorpusReader::new(&empty[..]).unwrap(), CorpusWriter::new(&mut out).unwrap()).unwrap();
        assert_eq!(n, 0);
        assert_eq!(String::from_utf8(out).unwrap(), "#sefun-corpus v1\n");
    }
}
