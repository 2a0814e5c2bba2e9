//! Conversation corpus: data model, line-delimited file format and
//! statistics.

mod adjudicate;
mod segment;
mod vocab;

pub use adjudicate::{
    adjudicate_pair, aggregate_annotations, confirm_annotation, confirm_pair, AggregationOutcome,
    AnnotationRecord, DropReason, LabelAtom, LabelRecord, PairOutcome, SegmentAnnotation,
};
pub use segment::{detokenize, is_delimiter, segment, DefaultTokenizer, Tokenizer, DELIMITERS};
pub use vocab::{build_vocab, Vocabulary, BOS, EOS, PAD, RESERVED, UNK, VOCAB_HEADER};

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{parse_label, Level1, Level2, SentenceFunction};

pub const CORPUS_HEADER: &str = "#sefun-corpus v1";
const CORPUS_MAGIC: &str = "#sefun-corpus";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("input text is empty")]
    EmptyInput,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("expected exactly 3 annotation records, got {0}")]
    RecordCountMismatch(usize),
    #[error("annotation records cover different segments")]
    SegmentMismatch,
    #[error("outcome is not awaiting confirmation")]
    InvalidState,
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported corpus schema `{0}` (expected `{CORPUS_HEADER}`)")]
    SchemaVersionMismatch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Classifier confidence attached by automatic annotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confidence {
    pub level1: f64,
    pub level2: f64,
}

/// A punctuation-delimited piece of a query or response.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub text: String,
    pub tokens: Vec<String>,
    /// Zero, one or two functions; the first is the primary label.
    pub functions: Vec<SentenceFunction>,
    pub confidence: Option<Confidence>,
}

impl Segment {
    pub fn new(text: &str, functions: Vec<SentenceFunction>) -> Self {
        Segment {
            text: text.to_string(),
            tokens: DefaultTokenizer.tokenize(text),
            functions,
            confidence: None,
        }
    }

    pub fn unlabeled(text: &str) -> Self {
        Segment::new(text, Vec::new())
    }

    pub fn labeled(text: &str, sf: SentenceFunction) -> Self {
        Segment::new(text, vec![sf])
    }

    pub fn primary(&self) -> Option<SentenceFunction> {
        self.functions.first().copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConversationPair {
    pub query: Vec<Segment>,
    pub response: Vec<Segment>,
    pub source: String,
}

impl ConversationPair {
    pub fn from_texts(query: &[&str], response: &[&str], source: &str) -> Self {
        ConversationPair {
            query: query.iter().map(|t| Segment::unlabeled(t)).collect(),
            response: response.iter().map(|t| Segment::unlabeled(t)).collect(),
            source: source.to_string(),
        }
    }

    /// Segments raw query and response text at punctuation.
    pub fn from_raw(query: &str, response: &str, source: &str) -> Result<Self, CorpusError> {
        Ok(ConversationPair {
            query: segment(query)?.iter().map(|t| Segment::unlabeled(t)).collect(),
            response: segment(response)?.iter().map(|t| Segment::unlabeled(t)).collect(),
            source: source.to_string(),
        })
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.query.iter().chain(&self.response)
    }

    pub fn all_labeled(&self) -> bool {
        self.segments().all(|s| !s.functions.is_empty())
    }

    pub fn query_text(&self) -> String {
        self.query.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn response_text(&self) -> String {
        self.response.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn query_tokens(&self) -> Vec<String> {
        self.query.iter().flat_map(|s| s.tokens.iter().cloned()).collect()
    }

    pub fn response_tokens(&self) -> Vec<String> {
        self.response.iter().flat_map(|s| s.tokens.iter().cloned()).collect()
    }

    /// Primary function of the first response segment, the single target a
    /// response is judged by.
    pub fn response_function(&self) -> Option<SentenceFunction> {
        self.response.first().and_then(Segment::primary)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub pairs: Vec<ConversationPair>,
}

impl Corpus {
    pub fn new(pairs: Vec<ConversationPair>) -> Self {
        Corpus { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Keeps only pairs accepted by `keep`. Content filters such as a
    /// dirty-word lexicon plug in here.
    pub fn retain_pairs<F: FnMut(&ConversationPair) -> bool>(&mut self, keep: F) {
        self.pairs.retain(keep);
    }

    /// Deterministic split: the first `n` pairs and the rest.
    pub fn split_at(&self, n: usize) -> (Corpus, Corpus) {
        let n = n.min(self.pairs.len());
        (Corpus::new(self.pairs[..n].to_vec()), Corpus::new(self.pairs[n..].to_vec()))
    }
}

/// Rejects pairs whose text contains any blocked word.
pub fn blocked_word_filter(words: Vec<String>) -> impl Fn(&ConversationPair) -> bool {
    move |pair| {
        !pair
            .segments()
            .any(|s| words.iter().any(|w| !w.is_empty() && s.text.contains(w.as_str())))
    }
}

// ---------------------------------------------------------------------------
// File format

#[derive(Serialize, Deserialize)]
struct WireSegment {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sf1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sf2: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sf2_alt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p2: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct WirePair {
    query: Vec<WireSegment>,
    response: Vec<WireSegment>,
    #[serde(default)]
    source: String,
}

impl From<&Segment> for WireSegment {
    fn from(s: &Segment) -> Self {
        WireSegment {
            text: s.text.clone(),
            tokens: Some(s.tokens.clone()),
            sf1: s.primary().map(|sf| sf.level1().abbrev().to_string()),
            sf2: s.primary().map(|sf| sf.to_string()),
            sf2_alt: s.functions.get(1).map(|sf| sf.to_string()),
            p1: s.confidence.map(|c| c.level1),
            p2: s.confidence.map(|c| c.level2),
        }
    }
}

impl WireSegment {
    fn into_segment(self) -> Result<Segment, String> {
        if self.text.trim().is_empty() {
            return Err("segment text is empty".into());
        }
        let mut functions = Vec::new();
        match (&self.sf1, &self.sf2) {
            (None, None) => {
                if self.sf2_alt.is_some() {
                    return Err("sf2_alt given without sf2".into());
                }
            }
            (Some(_), None) => return Err("sf1 given without sf2".into()),
            (l1, Some(l2)) => {
                let sf = parse_label(l2).map_err(|e| e.to_string())?;
                if let Some(l1) = l1 {
                    let l1: Level1 = l1.parse().map_err(|e: crate::taxonomy::TaxonomyError| e.to_string())?;
                    if l1 != sf.level1() {
                        return Err(format!("sf1 `{}` is not the parent of `{}`", l1, sf));
                    }
                }
                functions.push(sf);
                if let Some(alt) = &self.sf2_alt {
                    let alt = parse_label(alt).map_err(|e| e.to_string())?;
                    if alt.level1() != sf.level1() {
                        return Err(format!("sf2_alt `{}` has a different parent than `{}`", alt, sf));
                    }
                    functions.push(alt);
                }
            }
        }
        let confidence = match (self.p1, self.p2) {
            (Some(level1), Some(level2)) => Some(Confidence { level1, level2 }),
            (None, None) => None,
            _ => return Err("p1 and p2 must appear together".into()),
        };
        let tokens = self
            .tokens
            .unwrap_or_else(|| DefaultTokenizer.tokenize(&self.text));
        Ok(Segment { text: self.text, tokens, functions, confidence })
    }
}

/// Encodes one pair as a single JSON line (no trailing newline).
pub fn encode_pair(pair: &ConversationPair) -> String {
    let wire = WirePair {
        query: pair.query.iter().map(WireSegment::from).collect(),
        response: pair.response.iter().map(WireSegment::from).collect(),
        source: pair.source.clone(),
    };
    serde_json::to_string(&wire).expect("corpus records always serialize")
}

/// Decodes one record line; `line_no` is used in error messages.
pub fn decode_pair(line: &str, line_no: usize) -> Result<ConversationPair, CorpusError> {
    let parse_err = |message: String| CorpusError::Parse { line: line_no, message };
    let wire: WirePair = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
    if wire.query.is_empty() || wire.response.is_empty() {
        return Err(parse_err("query and response need at least one segment".into()));
    }
    let convert = |segs: Vec<WireSegment>| {
        segs.into_iter()
            .map(WireSegment::into_segment)
            .collect::<Result<Vec<_>, _>>()
    };
    Ok(ConversationPair {
        query: convert(wire.query).map_err(parse_err)?,
        response: convert(wire.response).map_err(parse_err)?,
        source: wire.source,
    })
}

fn check_header(line: Option<io::Result<String>>) -> Result<(), CorpusError> {
    match line {
        None => Err(CorpusError::Parse { line: 1, message: "missing header".into() }),
        Some(line) => {
            let line = line?;
            let line = line.trim_end();
            if line == CORPUS_HEADER {
                Ok(())
            } else if line.starts_with(CORPUS_MAGIC) {
                Err(CorpusError::SchemaVersionMismatch(line.to_string()))
            } else {
                Err(CorpusError::Parse {
                    line: 1,
                    message: format!("expected header `{CORPUS_HEADER}`"),
                })
            }
        }
    }
}

/// Streams pairs from a corpus file without holding it in memory.
pub struct CorpusReader<R> {
    lines: io::Lines<R>,
    line_no: usize,
}

impl CorpusReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, CorpusError> {
        CorpusReader::new(BufReader::new(File::open(path)?))
    }
}

impl<R: BufRead> CorpusReader<R> {
    pub fn new(reader: R) -> Result<Self, CorpusError> {
        let mut lines = reader.lines();
        check_header(lines.next())?;
        Ok(CorpusReader { lines, line_no: 1 })
    }
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<ConversationPair, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(decode_pair(&line, self.line_no));
        }
    }
}

/// Writes the header then one record per pair.
pub struct CorpusWriter<W: Write> {
    out: W,
}

impl CorpusWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self, CorpusError> {
        CorpusWriter::new(BufWriter::new(File::create(path)?))
    }
}

impl<W: Write> CorpusWriter<W> {
    pub fn new(mut out: W) -> Result<Self, CorpusError> {
        writeln!(out, "{CORPUS_HEADER}")?;
        Ok(CorpusWriter { out })
    }

    pub fn write(&mut self, pair: &ConversationPair) -> Result<(), CorpusError> {
        writeln!(self.out, "{}", encode_pair(pair))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, CorpusError> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn read_corpus<R: BufRead>(reader: R) -> Result<Corpus, CorpusError> {
    Ok(Corpus::new(CorpusReader::new(reader)?.collect::<Result<_, _>>()?))
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    read_corpus(BufReader::new(File::open(path)?))
}

pub fn write_corpus<W: Write>(corpus: &Corpus, out: W) -> Result<W, CorpusError> {
    let mut writer = CorpusWriter::new(out)?;
    for pair in &corpus.pairs {
        writer.write(pair)?;
    }
    writer.finish()
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    write_corpus(corpus, BufWriter::new(File::create(path)?))?;
    Ok(())
}

/// Reads annotation records, one JSON object per line.
pub fn load_annotation_records(path: &Path) -> Result<Vec<AnnotationRecord>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let record: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Parse { line: i + 1, message: e.to_string() })?;
        out.push(record);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Statistics

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SideStats {
    pub segments: usize,
    pub unlabeled: usize,
    /// Segments per primary level-2 label, in code order.
    pub counts: [usize; Level2::COUNT],
}

impl Default for SideStats {
    fn default() -> Self {
        SideStats { segments: 0, unlabeled: 0, counts: [0; Level2::COUNT] }
    }
}

impl SideStats {
    fn add(&mut self, seg: &Segment) {
        self.segments += 1;
        match seg.primary() {
            Some(sf) => self.counts[sf.level2().code()] += 1,
            None => self.unlabeled += 1,
        }
    }

    pub fn labeled(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn count(&self, l2: Level2) -> usize {
        self.counts[l2.code()]
    }

    pub fn level1_count(&self, l1: Level1) -> usize {
        l1.children().map(|l2| self.count(l2)).sum()
    }

    /// Share of this side's segments, in percent.
    pub fn percent(&self, l2: Level2) -> f64 {
        if self.segments == 0 {
            0.0
        } else {
            100.0 * self.count(l2) as f64 / self.segments as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub pairs: usize,
    pub query: SideStats,
    pub response: SideStats,
}

impl CorpusStats {
    pub fn add_pair(&mut self, pair: &ConversationPair) {
        self.pairs += 1;
        pair.query.iter().for_each(|s| self.query.add(s));
        pair.response.iter().for_each(|s| self.response.add(s));
    }
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut stats = CorpusStats::default();
    corpus.pairs.iter().for_each(|p| stats.add_pair(p));
    stats
}

/// Streams a corpus file through [`CorpusStats`] without loading it.
pub fn corpus_stats_from_path(path: &Path) -> Result<CorpusStats, CorpusError> {
    let mut stats = CorpusStats::default();
    for pair in CorpusReader::open(path)? {
        stats.add_pair(&pair?);
    }
    Ok(stats)
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<26} {:>16} {:>16}", "Sentence Function", "Query", "Response")?;
        for l1 in Level1::ALL {
            writeln!(f, "{} ({})", l1.full_name(), l1.abbrev())?;
            for l2 in l1.children() {
                writeln!(
                    f,
                    "  {:<24} {:>8} ({:>5.1}%) {:>8} ({:>5.1}%)",
                    l2.name(),
                    self.query.count(l2),
                    self.query.percent(l2),
                    self.response.count(l2),
                    self.response.percent(l2),
                )?;
            }
        }
        writeln!(f, "{:<26} {:>16} {:>16}", "Unlabeled segments", self.query.unlabeled, self.response.unlabeled)?;
        writeln!(f, "{:<26} {:>16} {:>16}", "Total pairs", self.pairs, self.pairs)?;
        write!(f, "{:<26} {:>16} {:>16}", "Total sentence segments", self.query.segments, self.response.segments)
    }
}
