//! Byte-level byte-pair tokenizer.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Context window of the text encoder.
pub const SEGMENT_LEN: usize = 77;
/// Longest prompt accepted: two windows.
pub const MAX_TOKENS: usize = 2 * SEGMENT_LEN;

const MERGES_HEADER: &str = "#histodiff-bpe v1";

/// Token ids of one prompt, at most [`MAX_TOKENS`] long.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<u32>,
    /// Set when the source text produced more than [`MAX_TOKENS`] tokens.
    pub truncated: bool,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() > MAX_TOKENS {
            return Err(Error::invalid(format!("{} tokens exceed the cap of {MAX_TOKENS}", tokens.len())));
        }
        Ok(Self { tokens, truncated: false })
    }

    /// Keeps the first [`MAX_TOKENS`] ids and flags the cut.
    pub fn truncating(mut tokens: Vec<u32>) -> Self {
        let truncated = tokens.len() > MAX_TOKENS;
        tokens.truncate(MAX_TOKENS);
        Self { tokens, truncated }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn segment_len(&self) -> usize {
        SEGMENT_LEN
    }
}

/// Ids 0..256 are raw bytes; each merge appends one id.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    pieces: Vec<Vec<u8>>,
}

/// Splits text into words that each start with their leading whitespace.
fn words(text: &str) -> Vec<&[u8]> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..bytes.len() {
        let ws = bytes[i].is_ascii_whitespace();
        if ws && !bytes[i - 1].is_ascii_whitespace() {
            out.push(&bytes[start..i]);
            start = i;
        }
    }
    if start < bytes.len() {
        out.push(&bytes[start..]);
    }
    out
}

fn merge_pair(word: &mut Vec<u32>, pair: (u32, u32), id: u32) {
    let mut i = 0;
    let mut out = Vec::with_capacity(word.len());
    while i < word.len() {
        if i + 1 < word.len() && (word[i], word[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    *word = out;
}

impl Tokenizer {
    /// No merges; every byte is a token.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new())
    }

    fn from_merges(merges: Vec<(u32, u32)>) -> Self {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::new();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let mut piece = pieces[a as usize].clone();
            piece.extend_from_slice(&pieces[b as usize]);
            pieces.push(piece);
            ranks.insert((a, b), rank as u32);
        }
        Self { merges, ranks, pieces }
    }

    /// Learns merges from `texts` until `vocab_size` ids exist or no pair repeats.
    pub fn train<S: AsRef<str>>(texts: &[S], vocab_size: usize) -> Result<Self> {
        if vocab_size < 256 {
            return Err(Error::invalid("vocabulary must hold at least the 256 byte tokens"));
        }
        let mut counts: HashMap<&[u8], usize> = HashMap::new();
        for text in texts {
            for w in words(text.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut corpus: Vec<(Vec<u32>, usize)> =
            counts.into_iter().map(|(w, n)| (w.iter().map(|&b| b as u32).collect(), n)).collect();
        corpus.sort();
        let mut merges = Vec::new();
        while 256 + merges.len() < vocab_size {
            let mut pairs: HashMap<(u32, u32), usize> = HashMap::new();
            for (w, n) in &corpus {
                for p in w.windows(2) {
                    *pairs.entry((p[0], p[1])).or_default() += n;
                }
            }
            // Most frequent pair, smallest ids on ties.
            let Some((&pair, &n)) = pairs.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
                break;
            };
            if n < 2 {
                break;
            }
            let id = 256 + merges.len() as u32;
            for (w, _) in &mut corpus {
                merge_pair(w, pair, id);
            }
            merges.push(pair);
        }
        Ok(Self::from_merges(merges))
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    fn encode_word(&self, word: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = word.iter().map(|&b| b as u32).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                .min();
            match best {
                Some((rank, pair)) => merge_pair(&mut ids, pair, 256 + rank),
                None => return ids,
            }
        }
    }

    /// All token ids of `text`, without the length cap.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        words(text).into_iter().flat_map(|w| self.encode_word(w)).collect()
    }

    /// Capped tokenization with the truncation flag.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        TokenSequence::truncating(self.encode(text))
    }

    pub fn count(&self, text: &str) -> usize {
        self.encode(text).len()
    }

    pub fn detokenize(&self, tokens: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &t in tokens {
            let piece = self
                .pieces
                .get(t as usize)
                .ok_or_else(|| Error::invalid(format!("token id {t} outside vocabulary")))?;
            bytes.extend_from_slice(piece);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Writes the merges file: a header, then one `left right` id pair per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = format!("{MERGES_HEADER}\n");
        for (a, b) in &self.merges {
            text.push_str(&format!("{a} {b}\n"));
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some(MERGES_HEADER) {
            return Err(Error::invalid(format!("{} is not a merges file", path.display())));
        }
        let mut merges = Vec::new();
        for (n, line) in lines.enumerate() {
            let parsed: Option<(u32, u32)> = line
                .split_once(' ')
                .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)));
            let (a, b) = parsed.ok_or_else(|| Error::invalid(format!("bad merge on line {}", n + 2)))?;
            let next = 256 + merges.len() as u32;
            if a >= next || b >= next {
                return Err(Error::invalid(format!("merge on line {} references a later id", n + 2)));
            }
            merges.push((a, b));
        }
        Ok(Self::from_merges(merges))
    }
}
