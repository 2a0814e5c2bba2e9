use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ratio, RankedCandidate, RetrieveError};
use crate::corpus::{decode_pair, encode_pair, ConversationPair, Corpus};

pub const INDEX_MAGIC: &[u8; 8] = b"SEFUNIDX";
const VERSION: u32 = 1;

/// How query token lists are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// Jaccard over token sets.
    #[default]
    Set,
    /// Jaccard over token multisets.
    Multiset,
}

impl std::str::FromStr for Similarity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "set" => Ok(Similarity::Set),
            "multiset" => Ok(Similarity::Multiset),
            other => Err(format!("unknown similarity `{other}` (expected set or multiset)")),
        }
    }
}

/// Inverted index from query tokens to pair ids.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    similarity: Similarity,
    /// Sorted token dictionary; a token's position is its id.
    dictionary: Vec<String>,
    /// Per token id, ascending pair ids.
    postings: Vec<Vec<u32>>,
    /// Per pair, `(token id, count)` sorted by token id.
    queries: Vec<Vec<(u32, u32)>>,
    /// Per pair, its weight (distinct tokens or total tokens).
    sizes: Vec<u32>,
    pairs: Vec<ConversationPair>,
}

fn counts<S: AsRef<str>>(tokens: &[S]) -> BTreeMap<&str, u32> {
    let mut m = BTreeMap::new();
    for t in tokens {
        *m.entry(t.as_ref()).or_insert(0) += 1;
    }
    m
}

impl RetrievalIndex {
    pub fn build(corpus: &Corpus, similarity: Similarity) -> Result<Self, RetrieveError> {
        if corpus.is_empty() {
            return Err(RetrieveError::EmptyCorpus);
        }
        let token_lists: Vec<Vec<String>> = corpus.pairs.iter().map(|p| p.query_tokens()).collect();
        let mut vocab: BTreeMap<&str, u32> = BTreeMap::new();
        for list in &token_lists {
            for t in list {
                vocab.entry(t.as_str()).or_insert(0);
            }
        }
        for (i, v) in vocab.values_mut().enumerate() {
            *v = i as u32;
        }
        let dictionary: Vec<String> = vocab.keys().map(|s| s.to_string()).collect();
        let mut postings = vec![Vec::new(); dictionary.len()];
        let mut queries = Vec::with_capacity(token_lists.len());
        let mut sizes = Vec::with_capacity(token_lists.len());
        for (pid, list) in token_lists.iter().enumerate() {
            let c = counts(list);
            let entry: Vec<(u32, u32)> = c.iter().map(|(t, n)| (vocab[t], *n)).collect();
            for &(tid, _) in &entry {
                postings[tid as usize].push(pid as u32);
            }
            sizes.push(Self::weight(similarity, &entry));
            queries.push(entry);
        }
        Ok(RetrievalIndex { similarity, dictionary, postings, queries, sizes, pairs: corpus.pairs.clone() })
    }

    fn weight(similarity: Similarity, entry: &[(u32, u32)]) -> u32 {
        match similarity {
            Similarity::Set => entry.len() as u32,
            Similarity::Multiset => entry.iter().map(|e| e.1).sum(),
        }
    }

    pub fn similarity(&self) -> Similarity {
        self.similarity
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair(&self, id: usize) -> &ConversationPair {
        &self.pairs[id]
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.dictionary.binary_search_by(|t| t.as_str().cmp(token)).ok().map(|i| i as u32)
    }

    /// Pair ids containing `token`.
    pub fn postings(&self, token: &str) -> &[u32] {
        self.token_id(token).map(|i| self.postings[i as usize].as_slice()).unwrap_or(&[])
    }

    /// Top `k` pairs by Jaccard score against their stored query, sorted by
    /// score descending then pair id ascending. When fewer than `k` pairs
    /// share a token with the query, zero-score pairs fill the list in id
    /// order, so the result always equals a full scan.
    pub fn retrieve_topk<S: AsRef<str>>(&self, query: &[S], k: usize) -> Vec<RankedCandidate> {
        let qc = counts(query);
        let q_weight: u32 = match self.similarity {
            Similarity::Set => qc.len() as u32,
            Similarity::Multiset => qc.values().sum(),
        };
        let mut overlap: HashMap<u32, u32> = HashMap::new();
        for (tok, qn) in &qc {
            let Some(tid) = self.token_id(tok) else { continue };
            for &pid in &self.postings[tid as usize] {
                let add = match self.similarity {
                    Similarity::Set => 1,
                    Similarity::Multiset => {
                        let entry = &self.queries[pid as usize];
                        let pos = entry.binary_search_by_key(&tid, |e| e.0).expect("posting is consistent");
                        (*qn).min(entry[pos].1)
                    }
                };
                *overlap.entry(pid).or_insert(0) += add;
            }
        }
        let mut scored: Vec<(f64, u32)> = overlap
            .into_iter()
            .map(|(pid, inter)| {
                let union = q_weight + self.sizes[pid as usize] - inter;
                (ratio(inter as usize, union as usize), pid)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.truncate(k);
        if scored.len() < k {
            let seen: HashSet<u32> = scored.iter().map(|s| s.1).collect();
            let need = k - scored.len();
            let fill: Vec<(f64, u32)> = (0..self.pairs.len() as u32)
                .filter(|p| !seen.contains(p))
                .take(need)
                .map(|p| (0.0, p))
                .collect();
            // Positive scores all precede zero scores; any zero-score pairs
            // already present are re-merged by id.
            scored.extend(fill);
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        }
        scored.into_iter().map(|(s, pid)| self.candidate(pid as usize, s)).collect()
    }

    pub(crate) fn candidate(&self, pid: usize, score: f64) -> RankedCandidate {
        let pair = &self.pairs[pid];
        RankedCandidate {
            pair_id: pid,
            response: pair.response_text(),
            lead_tokens: pair.response.first().map(|s| s.tokens.clone()).unwrap_or_default(),
            base_score: score,
            prediction: None,
            penalty: 0.0,
            rerank_score: score,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), RetrieveError> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[match self.similarity {
            Similarity::Set => 0,
            Similarity::Multiset => 1,
        }])?;
        put_u32(&mut w, self.dictionary.len() as u32)?;
        for t in &self.dictionary {
            put_bytes(&mut w, t.as_bytes())?;
        }
        for p in &self.postings {
            put_u32(&mut w, p.len() as u32)?;
            for id in p {
                put_u32(&mut w, *id)?;
            }
        }
        put_u32(&mut w, self.pairs.len() as u32)?;
        for (entry, pair) in self.queries.iter().zip(&self.pairs) {
            put_u32(&mut w, entry.len() as u32)?;
            for (t, n) in entry {
                put_u32(&mut w, *t)?;
                put_u32(&mut w, *n)?;
            }
            put_bytes(&mut w, encode_pair(pair).as_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, RetrieveError> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(RetrieveError::Format("not an index file".into()));
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(RetrieveError::Format(format!("unsupported index version {version}")));
        }
        let mut sim = [0u8; 1];
        read_exact(&mut r, &mut sim)?;
        let similarity = match sim[0] {
            0 => Similarity::Set,
            1 => Similarity::Multiset,
            other => return Err(RetrieveError::Format(format!("unknown similarity code {other}"))),
        };
        let n_tokens = get_u32(&mut r)? as usize;
        let mut dictionary = Vec::with_capacity(n_tokens.min(1 << 20));
        for _ in 0..n_tokens {
            dictionary.push(get_string(&mut r)?);
        }
        if dictionary.windows(2).any(|w| w[0] >= w[1]) {
            return Err(RetrieveError::Format("dictionary is not sorted".into()));
        }
        let mut postings = Vec::with_capacity(n_tokens.min(1 << 20));
        for _ in 0..n_tokens {
            let n = get_u32(&mut r)? as usize;
            let list = (0..n).map(|_| get_u32(&mut r)).collect::<Result<Vec<_>, _>>()?;
            postings.push(list);
        }
        let n_pairs = get_u32(&mut r)? as usize;
        let mut queries = Vec::with_capacity(n_pairs.min(1 << 20));
        let mut pairs = Vec::with_capacity(n_pairs.min(1 << 20));
        for i in 0..n_pairs {
            let n = get_u32(&mut r)? as usize;
            let mut entry = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                entry.push((get_u32(&mut r)?, get_u32(&mut r)?));
            }
            if entry.iter().any(|e| e.0 as usize >= n_tokens) {
                return Err(RetrieveError::Format(format!("pair {i} references an unknown token")));
            }
            queries.push(entry);
            let line = get_string(&mut r)?;
            pairs.push(decode_pair(&line, i + 1)?);
        }
        if postings.iter().flatten().any(|&p| p as usize >= n_pairs) {
            return Err(RetrieveError::Format("posting references an unknown pair".into()));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(RetrieveError::Format("trailing bytes".into()));
        }
        let sizes = queries.iter().map(|e| Self::weight(similarity, e)).collect();
        Ok(RetrievalIndex { similarity, dictionary, postings, queries, sizes, pairs })
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrieveError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, RetrieveError> {
        RetrievalIndex::read_from(BufReader::new(File::open(path)?))
    }
}

/// Reference top-k by scoring every stored query directly.
pub fn brute_force_topk<S: AsRef<str>>(corpus: &Corpus, query: &[S], k: usize, similarity: Similarity) -> Vec<(usize, f64)> {
    let q: Vec<&str> = query.iter().map(|s| s.as_ref()).collect();
    let mut all: Vec<(usize, f64)> = corpus
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let toks = p.query_tokens();
            let toks: Vec<&str> = toks.iter().map(String::as_str).collect();
            let s = match similarity {
                Similarity::Set => super::jaccard(&q.iter().copied().collect(), &toks.iter().copied().collect()),
                Similarity::Multiset => super::multiset_jaccard(&q, &toks),
            };
            (i, s)
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), RetrieveError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            RetrieveError::Format("truncated index file".into())
        } else {
            RetrieveError::Io(e)
        }
    })
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_bytes<W: Write>(w: &mut W, b: &[u8]) -> std::io::Result<()> {
    put_u32(w, b.len() as u32)?;
    w.write_all(b)
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32, RetrieveError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_string<R: Read>(r: &mut R) -> Result<String, RetrieveError> {
    let n = get_u32(r)? as usize;
    let mut buf = Vec::new();
    r.by_ref().take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(RetrieveError::Format("truncated index file".into()));
    }
    String::from_utf8(buf).map_err(|_| RetrieveError::Format("invalid UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(queries: &[&str]) -> Corpus {
        Corpus::new(queries.iter().map(|q| ConversationPair::from_raw(q, &format!("回{q}"), "t").unwrap()).collect())
    }

    #[test]
    fn single_pair_posts_every_token() {
        let idx = RetrievalIndex::build(&corpus(&["你好吗"]), Similarity::Set).unwrap();
        for t in ["你", "好", "吗"] {
            assert_eq!(idx.postings(t), &[0]);
        }
        assert!(matches!(RetrievalIndex::build(&Corpus::default(), Similarity::Set), Err(RetrieveError::EmptyCorpus)));
    }

    #[test]
    fn exact_query_ranks_first_and_small_corpus_returned_whole() {
        let c = corpus(&["你好吗", "今天天气好", "吃饭了吗", "天气"]);
        let idx = RetrievalIndex::build(&c, Similarity::Set).unwrap();
        let q = c.pairs[2].query_tokens();
        let top = idx.retrieve_topk(&q, 20);
        assert_eq!(top.len(), 4);
        assert_eq!(top[0].pair_id, 2);
        assert_eq!(top[0].base_score, 1.0);
        let brute: Vec<_> = brute_force_topk(&c, &q, 20, Similarity::Set);
        assert_eq!(top.iter().map(|c| (c.pair_id, c.base_score)).collect::<Vec<_>>(), brute);
        let none = idx.retrieve_topk(&["zzz"], 2);
        assert_eq!(none.iter().map(|c| c.pair_id).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn multiset_agrees_with_scan() {
        let c = corpus(&["好好好吗", "好吗吗", "不好"]);
        let idx = RetrievalIndex::build(&c, Similarity::Multiset).unwrap();
        let q = ["好", "好", "吗"];
        let top = idx.retrieve_topk(&q, 3);
        let brute = brute_force_topk(&c, &q, 3, Similarity::Multiset);
        assert_eq!(top.iter().map(|c| (c.pair_id, c.base_score)).collect::<Vec<_>>(), brute);
    }

    #[test]
    fn file_round_trip_and_rebuild_bytes() {
        let c = corpus(&["你好吗", "今天天气好", "吃饭了吗"]);
        let a = RetrievalIndex::build(&c, Similarity::Set).unwrap();
        let mut ba = Vec::new();
        a.write_to(&mut ba).unwrap();
        let mut bb = Vec::new();
        RetrievalIndex::build(&c, Similarity::Set).unwrap().write_to(&mut bb).unwrap();
        assert_eq!(ba, bb);
        assert_eq!(RetrievalIndex::read_from(&ba[..]).unwrap(), a);
        assert!(matches!(RetrievalIndex::read_from(&ba[..ba.len() - 1]), Err(RetrieveError::Format(_))));
    }
}
