//! Template-generated labeled corpora.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HarnessError;
use crate::corpus::{ConversationPair, Corpus, Segment};
use crate::taxonomy::{Level2, SentenceFunction};

/// Content words for template slots. None shares a character with any
/// template literal.
pub const WORD_POOL: [&str; 40] = [
    "猫咪", "电影", "歌曲", "咖啡", "足球", "火锅", "风筝", "春天", "大海", "书店", "跑步", "熊猫", "面条", "雪山",
    "花园", "月亮", "蛋糕", "画画", "游泳", "钢琴", "森林", "夏天", "电脑", "西瓜", "草莓", "汽车", "手机", "小狗",
    "公园", "星星", "山水", "茶叶", "围巾", "篮球", "气球", "饺子", "米饭", "苹果", "老虎", "海鸥",
];

/// Query-side label counts of the annotated dataset, in `Level2::ALL` order.
pub const DATASET_QUERY_COUNTS: [f64; 20] = [
    49223.0, 9241.0, 887.0, 40.0, 2675.0, 23385.0, 6469.0, 6456.0, 789.0, 170.0, 42.0, 0.0, 227.0, 2073.0, 86.0, 7.0,
    4.0, 241.0, 364.0, 167.0,
];

/// Response-side label counts of the annotated dataset.
pub const DATASET_RESPONSE_COUNTS: [f64; 20] = [
    67540.0, 18428.0, 2660.0, 99.0, 5218.0, 7652.0, 4046.0, 1055.0, 279.0, 271.0, 417.0, 345.0, 11.0, 358.0, 58.0, 4.0,
    2.0, 3948.0, 1958.0, 285.0,
];

#[derive(Debug, Clone, PartialEq)]
enum Part {
    Lit(String),
    X,
    Y,
}

/// A sentence pattern with content slots `{x}` and `{y}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pattern: String,
    parts: Vec<Part>,
}

impl Template {
    pub fn new(pattern: &str) -> Self {
        let mut parts = Vec::new();
        let mut rest = pattern;
        while let Some(i) = rest.find('{') {
            if i > 0 {
                parts.push(Part::Lit(rest[..i].to_string()));
            }
            let (slot, tail) = if let Some(t) = rest[i..].strip_prefix("{x}") {
                (Part::X, t)
            } else if let Some(t) = rest[i..].strip_prefix("{y}") {
                (Part::Y, t)
            } else {
                parts.push(Part::Lit("{".into()));
                rest = &rest[i + 1..];
                continue;
            };
            parts.push(slot);
            rest = tail;
        }
        if !rest.is_empty() {
            parts.push(Part::Lit(rest.to_string()));
        }
        Template { pattern: pattern.to_string(), parts }
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn fill(&self, x: &str, y: &str) -> String {
        self.parts
            .iter()
            .map(|p| match p {
                Part::Lit(s) => s.as_str(),
                Part::X => x,
                Part::Y => y,
            })
            .collect()
    }

    pub fn literals(&self) -> impl Iterator<Item = &str> {
        self.parts.iter().filter_map(|p| match p {
            Part::Lit(s) => Some(s.as_str()),
            _ => None,
        })
    }

    /// Whether `text` is this template with slots filled from `pool`.
    pub fn matches(&self, text: &str, pool: &[&str]) -> bool {
        fn go(parts: &[Part], text: &str, pool: &[&str]) -> bool {
            match parts.split_first() {
                None => text.is_empty(),
                Some((Part::Lit(s), rest)) => text.strip_prefix(s.as_str()).is_some_and(|t| go(rest, t, pool)),
                Some((_, rest)) => pool.iter().any(|w| text.strip_prefix(w).is_some_and(|t| go(rest, t, pool))),
            }
        }
        go(&self.parts, text, pool)
    }
}

/// Templates for every level-2 label plus the content word pool.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSpec {
    pub templates: BTreeMap<Level2, Vec<Template>>,
    pub words: Vec<String>,
}

impl Default for TemplateSpec {
    fn default() -> Self {
        use Level2::*;
        let table: [(Level2, &[&str]); 20] = [
            (PositiveDe, &["我喜欢{x}。", "{x}很有意思。"]),
            (NegativeDe, &["我不喜欢{x}。", "{x}没有意思。"]),
            (DeWithInWords, &["谁都知道{x}。", "{x}怎么都行。"]),
            (DoubleNegativeDe, &["我不是不喜欢{x}。", "没有人不爱{x}。"]),
            (OtherDe, &["{x}和{y}。"]),
            (WhStyleIn, &["为什么{x}？", "{x}在哪里？"]),
            (YesNoIn, &["{x}吗？"]),
            (ANotAIn, &["{x}好不好？", "你去不去{x}？"]),
            (AlternativeIn, &["{x}还是{y}？"]),
            (InWithTagQuestion, &["{x}对吧？"]),
            (Rhetorical, &["难道{x}不好吗？"]),
            (InWithBackchannel, &["你是说{x}？"]),
            (InWithOpenQuestion, &["谈谈{x}吧。"]),
            (ImWithRequest, &["请给我{x}。"]),
            (ImWithDissuade, &["别再{x}了。"]),
            (ImWithCommand, &["快点{x}！"]),
            (ImWithForbidden, &["禁止{x}！"]),
            (ExWithoutToneWords, &["真{x}！"]),
            (ExWithInterjections, &["哇{x}啊！"]),
            (ExWithGreetings, &["祝你{x}快乐！"]),
        ];
        TemplateSpec {
            templates: table.iter().map(|(l, ps)| (*l, ps.iter().map(|p| Template::new(p)).collect())).collect(),
            words: WORD_POOL.iter().map(|w| w.to_string()).collect(),
        }
    }
}

impl TemplateSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if let Some(l) = Level2::ALL.iter().find(|l| self.templates.get(l).is_none_or(|t| t.is_empty())) {
            return Err(HarnessError::InvalidSpec(format!("no template for {l}")));
        }
        if self.words.len() < 2 {
            return Err(HarnessError::InvalidSpec("word pool needs at least two words".into()));
        }
        Ok(())
    }

    /// Labels whose templates match `text`.
    pub fn match_labels(&self, text: &str) -> Vec<Level2> {
        let pool: Vec<&str> = self.words.iter().map(String::as_str).collect();
        self.templates
            .iter()
            .filter(|(_, ts)| ts.iter().any(|t| t.matches(text, &pool)))
            .map(|(l, _)| *l)
            .collect()
    }

    /// A sentence of `label` from one of its templates, with `x` in the first
    /// slot and another pool word in the second.
    pub fn sentence<R: Rng>(&self, label: Level2, x: &str, rng: &mut R) -> String {
        let t = self.templates[&label].choose(rng).expect("validated spec");
        let y = loop {
            let y = self.words.choose(rng).expect("validated spec");
            if y != x {
                break y;
            }
        };
        t.fill(x, y)
    }
}

/// Per-class sampling weights in `Level2::ALL` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(pub [f64; 20]);

impl ClassWeights {
    pub fn uniform() -> Self {
        ClassWeights([1.0; 20])
    }

    pub fn dataset_query() -> Self {
        ClassWeights(DATASET_QUERY_COUNTS)
    }

    pub fn dataset_response() -> Self {
        ClassWeights(DATASET_RESPONSE_COUNTS)
    }

    fn sampler(&self) -> Result<WeightedIndex<f64>, HarnessError> {
        if self.0.iter().any(|w| !w.is_finite() || *w < 0.0) || self.0.iter().all(|w| *w == 0.0) {
            return Err(HarnessError::InvalidWeights);
        }
        WeightedIndex::new(self.0).map_err(|_| HarnessError::InvalidWeights)
    }
}

fn labeled(text: &str, l: Level2) -> Segment {
    Segment::labeled(text, SentenceFunction::new(l))
}

/// Pairs whose query and response are single template sentences with labels
/// drawn independently from `weights`.
pub fn gen_synthetic_corpus(spec: &TemplateSpec, n_pairs: usize, weights: &ClassWeights, seed: u64) -> Result<Corpus, HarnessError> {
    spec.validate()?;
    let sampler = weights.sampler()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n_pairs)
        .map(|_| {
            let mut side = || {
                let l = Level2::ALL[sampler.sample(&mut rng)];
                let x = spec.words.choose(&mut rng).expect("validated spec");
                labeled(&spec.sentence(l, x, &mut rng), l)
            };
            let query = side();
            let response = side();
            ConversationPair { query: vec![query], response: vec![response], source: "synthetic".into() }
        })
        .collect();
    Ok(Corpus::new(pairs))
}

/// Response label implied by a content word under [`gen_keyword_corpus`].
pub fn keyword_label(spec: &TemplateSpec, word: &str) -> Option<Level2> {
    spec.words.iter().position(|w| w == word).map(|i| Level2::ALL[i % Level2::COUNT])
}

/// Pairs where the response reuses the query's content word and its label is
/// [`keyword_label`] of that word, or a uniformly drawn label with
/// probability `noise`. Query labels are uniform.
pub fn gen_keyword_corpus(spec: &TemplateSpec, n_pairs: usize, noise: f64, seed: u64) -> Result<Corpus, HarnessError> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&noise) {
        return Err(HarnessError::InvalidWeights);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n_pairs)
        .map(|_| {
            let xi = rng.random_range(0..spec.words.len());
            let x = &spec.words[xi];
            let ql = *Level2::ALL.choose(&mut rng).expect("non-empty");
            let rl = if rng.random_bool(noise) {
                *Level2::ALL.choose(&mut rng).expect("non-empty")
            } else {
                Level2::ALL[xi % Level2::COUNT]
            };
            // Both slots carry the keyword so it is the only content word.
            let query = labeled(&spec.templates[&ql].choose(&mut rng).expect("validated spec").fill(x, x), ql);
            let response = labeled(&spec.templates[&rl].choose(&mut rng).expect("validated spec").fill(x, x), rl);
            ConversationPair { query: vec![query], response: vec![response], source: "keyword".into() }
        })
        .collect();
    Ok(Corpus::new(pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::segment;

    #[test]
    fn templates_are_distinguishable() {
        let spec = TemplateSpec::default();
        spec.validate().unwrap();
        for (label, ts) in &spec.templates {
            for t in ts {
                for x in &spec.words {
                    let s = t.fill(x, if x == "猫咪" { "电影" } else { "猫咪" });
                    assert_eq!(spec.match_labels(&s), vec![*label], "{s}");
                    assert_eq!(segment(&s).unwrap().len(), 1, "{s}");
                }
            }
        }
    }

    #[test]
    fn pool_avoids_literal_characters() {
        let spec = TemplateSpec::default();
        let lits: String = spec.templates.values().flatten().flat_map(|t| t.literals()).collect();
        for w in &spec.words {
            assert!(!w.chars().any(|c| lits.contains(c)), "{w}");
        }
    }

    #[test]
    fn generation_is_seeded_and_self_consistent() {
        let spec = TemplateSpec::default();
        let a = gen_synthetic_corpus(&spec, 300, &ClassWeights::dataset_query(), 5).unwrap();
        assert_eq!(a, gen_synthetic_corpus(&spec, 300, &ClassWeights::dataset_query(), 5).unwrap());
        for seg in a.pairs.iter().flat_map(|p| p.segments()) {
            assert_eq!(spec.match_labels(&seg.text), vec![seg.primary().unwrap().level2()]);
        }
        assert!(gen_synthetic_corpus(&spec, 0, &ClassWeights::uniform(), 1).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_weights() {
        let spec = TemplateSpec::default();
        for w in [[0.0; 20], { let mut w = [1.0; 20]; w[3] = -1.0; w }, { let mut w = [1.0; 20]; w[0] = f64::NAN; w }] {
            assert!(matches!(gen_synthetic_corpus(&spec, 5, &ClassWeights(w), 1), Err(HarnessError::InvalidWeights)));
        }
    }

    #[test]
    fn keyword_rule_without_noise() {
        let spec = TemplateSpec::default();
        let c = gen_keyword_corpus(&spec, 200, 0.0, 3).unwrap();
        for p in &c.pairs {
            let word = spec.words.iter().find(|w| p.query[0].text.contains(w.as_str())).unwrap();
            assert_eq!(Some(p.response_function().unwrap().level2()), keyword_label(&spec, word));
            assert!(p.response[0].text.contains(word.as_str()));
        }
    }
}
