use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError};

pub const VOCAB_HEADER: &str = "#sefun-vocab v1";

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Token/id mapping with reserved ids 0..3 and an UNK fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabWire", into = "VocabWire")]
pub struct Vocabulary {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, usize>,
    coverage: f64,
}

#[derive(Serialize, Deserialize)]
struct VocabWire {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    coverage: f64,
}

impl From<Vocabulary> for VocabWire {
    fn from(v: Vocabulary) -> Self {
        VocabWire { tokens: v.tokens, freqs: v.freqs, coverage: v.coverage }
    }
}

impl TryFrom<VocabWire> for Vocabulary {
    type Error = String;

    fn try_from(w: VocabWire) -> Result<Self, String> {
        if w.tokens.len() != w.freqs.len() {
            return Err("token and frequency lists differ in length".into());
        }
        Vocabulary::from_entries(w.tokens, w.freqs, w.coverage)
    }
}

impl Vocabulary {
    fn from_entries(tokens: Vec<String>, freqs: Vec<u64>, coverage: f64) -> Result<Self, String> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err("reserved tokens missing from ids 0..3".into());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate token `{t}`"));
            }
        }
        Ok(Vocabulary { tokens, freqs, index, coverage })
    }

    /// Keeps the `cap` most frequent tokens of `sequences`; ties go to the
    /// token seen first.
    pub fn build<'a, I, S>(sequences: I, cap: usize) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, (u64, usize)> = HashMap::new();
        let mut total = 0u64;
        for seq in sequences {
            for t in seq {
                let t = t.as_ref();
                let next = counts.len();
                counts.entry(t).or_insert((0, next)).0 += 1;
                total += 1;
            }
        }
        if total == 0 {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, u64, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(t))
            .map(|(t, (c, first))| (t, c, first))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(cap);
        let kept: u64 = ranked.iter().map(|r| r.1).sum();
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut freqs = vec![0; RESERVED.len()];
        for (t, c, _) in ranked {
            tokens.push(t.to_string());
            freqs.push(c);
        }
        let coverage = kept as f64 / total as f64;
        Ok(Vocabulary::from_entries(tokens, freqs, coverage).expect("fresh vocabulary is well formed"))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Fraction of training token occurrences covered at build time.
    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn freq(&self, id: usize) -> u64 {
        self.freqs.get(id).copied().unwrap_or(0)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), CorpusError> {
        writeln!(out, "{VOCAB_HEADER}")?;
        for (t, f) in self.tokens.iter().zip(&self.freqs) {
            if t.contains(['\t', '\n', '\r']) {
                return Err(CorpusError::InvalidAnnotation(format!("token {t:?} cannot be stored")));
            }
            writeln!(out, "{t}\t{f}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self, CorpusError> {
        let mut lines = reader.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim_end() != VOCAB_HEADER {
            return Err(CorpusError::SchemaVersionMismatch(header));
        }
        let mut tokens = Vec::new();
        let mut freqs = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let line_no = i + 2;
            let (t, f) = line
                .rsplit_once('\t')
                .ok_or_else(|| CorpusError::Parse { line: line_no, message: "expected `token<TAB>freq`".into() })?;
            let f = f
                .parse()
                .map_err(|e| CorpusError::Parse { line: line_no, message: format!("bad frequency: {e}") })?;
            tokens.push(t.to_string());
            freqs.push(f);
        }
        let total: u64 = freqs.iter().sum();
        let coverage = if total == 0 { 0.0 } else { 1.0 };
        Vocabulary::from_entries(tokens, freqs, coverage).map_err(|m| CorpusError::Parse { line: 0, message: m })
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Vocabulary::read_from(BufReader::new(File::open(path)?))
    }
}

/// Vocabulary over every query and response token of `corpus`.
pub fn build_vocab(corpus: &Corpus, cap: usize) -> Result<Vocabulary, CorpusError> {
    Vocabulary::build(corpus.pairs.iter().flat_map(|p| p.segments()).map(|s| s.tokens.as_slice()), cap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seqs() -> Vec<Vec<String>> {
        let raw = [vec!["b", "a", "c"], vec!["a", "d", "b"], vec!["a"]];
        raw.iter().map(|s| s.iter().map(|t| t.to_string()).collect()).collect()
    }

    fn build(cap: usize) -> Vocabulary {
        let s = seqs();
        Vocabulary::build(s.iter().map(Vec::as_slice), cap).unwrap()
    }

    #[test]
    fn frequency_then_first_occurrence() {
        let v = build(10);
        // a:3, b:2, c:1 (seen before d), d:1
        assert_eq!(&v.tokens[4..], &["a", "b", "c", "d"]);
        assert_eq!(v.coverage(), 1.0);
        assert_eq!(v.encode(&["a", "zzz"]), vec![4, UNK]);
    }

    #[test]
    fn cap_one_keeps_only_the_most_frequent() {
        let v = build(1);
        assert_eq!(v.len(), 5);
        assert_eq!(v.encode(&["a", "b", "c", "d"]), vec![4, UNK, UNK, UNK]);
        assert!((v.coverage() - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn empty_input_rejected() {
        let none: Vec<Vec<String>> = vec![vec![]];
        assert!(matches!(Vocabulary::build(none.iter().map(Vec::as_slice), 5), Err(CorpusError::EmptyCorpus)));
    }

    #[test]
    fn file_round_trip() {
        let v = build(10);
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("#sefun-vocab v1\n<pad>\t0\n"));
        let back = Vocabulary::read_from(&buf[..]).unwrap();
        assert_eq!(back.tokens, v.tokens);
        assert_eq!(back.freqs, v.freqs);
        assert!(Vocabulary::read_from(&b"#sefun-vocab v2\n"[..]).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let v = build(3);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
