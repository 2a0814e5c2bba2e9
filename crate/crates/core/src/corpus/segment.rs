//! Punctuation segmentation and default tokenization.

use super::CorpusError;

/// Characters that close a sentence segment. Each delimiter stays attached
/// to the end of the segment it closes.
pub const DELIMITERS: [char; 10] = ['。', '！', '？', '!', '?', '；', ';', '…', '，', ','];

pub fn is_delimiter(c: char) -> bool {
    DELIMITERS.contains(&c)
}

/// Splits `text` at sentence-delimiting punctuation.
///
/// Fragments made only of whitespace are dropped; every other fragment is
/// returned verbatim so that concatenating the result reproduces the input
/// minus those fragments.
pub fn segment(text: &str) -> Result<Vec<String>, CorpusError> {
    if text.trim().is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        current.push(c);
        if is_delimiter(c) {
            flush(&mut current, &mut out);
        }
    }
    flush(&mut current, &mut out);
    Ok(out)
}

fn flush(current: &mut String, out: &mut Vec<String>) {
    if !current.trim().is_empty() {
        out.push(std::mem::take(current));
    } else {
        current.clear();
    }
}

/// Splits a segment into model tokens.
pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Character-level for CJK runs, whitespace-delimited words for everything
/// else. Punctuation is always its own token.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultTokenizer;

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303F      // CJK symbols and punctuation
        | 0x3040..=0x30FF    // kana
        | 0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xF900..=0xFAFF
        | 0xFF00..=0xFFEF    // full-width forms
        | 0x2026             // ellipsis
        | 0x20000..=0x2FA1F)
}

impl Tokenizer for DefaultTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        let mut tokens = Vec::new();
        let mut word = String::new();
        for c in text.chars() {
            if c.is_whitespace() {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
            } else if is_cjk(c) || c.is_ascii_punctuation() {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_string());
            } else {
                word.push(c);
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
        tokens
    }
}

/// Inverse of [`DefaultTokenizer`] up to whitespace: tokens are concatenated,
/// with a single space only between two adjacent non-CJK word tokens.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut prev_word = false;
    for t in tokens {
        let t = t.as_ref();
        let is_word = t
            .chars()
            .next()
            .is_some_and(|c| !is_cjk(c) && !c.is_ascii_punctuation());
        if prev_word && is_word {
            out.push(' ');
        }
        out.push_str(t);
        prev_word = is_word;
    }
    out
}
