//! Corpus ingestion, vocabulary and padded batches.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const GO: u32 = 2;
pub const EOS: u32 = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<go>", "</s>"];

/// Lowercase + whitespace split.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// Token/id lookup. Ids 0..4 are PAD, UNK, GO, EOS; the rest are ordered by
/// descending training-corpus count, ties broken lexicographically. Tokens
/// appended by vocabulary expansion follow with a count of zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn with_specials() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            counts: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIAL_TOKENS {
            v.push_unchecked(s.to_string(), 0);
        }
        v
    }

    fn push_unchecked(&mut self, token: String, count: u64) -> u32 {
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        self.counts.push(count);
        id
    }

    /// Keeps the `max_size - 4` most frequent tokens of `corpus`.
    pub fn build<I, S>(corpus: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if max_size < NUM_SPECIALS {
            return Err(Error::InvalidHyperparameter(format!(
                "vocabulary size {max_size} leaves no room for the {NUM_SPECIALS} special tokens"
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut sentences = 0usize;
        for s in corpus {
            sentences += 1;
            for tok in tokenize(s.as_ref()) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if sentences == 0 {
            return Err(Error::Ingestion("corpus is empty".into()));
        }
        let mut ranked: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIAL_TOKENS.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - NUM_SPECIALS);
        let mut vocab = Self::with_specials();
        for (tok, c) in ranked {
            vocab.push_unchecked(tok, c);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Appends a token if absent; returns its id either way.
    pub fn push(&mut self, token: &str, count: u64) -> u32 {
        match self.id(token) {
            Some(id) => id,
            None => self.push_unchecked(token.to_string(), count),
        }
    }

    /// Tokenizes, maps unknown tokens to UNK and appends EOS.
    pub fn encode(&self, s: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = tokenize(s)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect();
        ids.push(EOS);
        ids
    }

    /// Number of tokens of `s` that would map to UNK.
    pub fn count_unknown(&self, s: &str) -> usize {
        tokenize(s).iter().filter(|t| !self.contains(t)).count()
    }

    /// Tokens up to (excluding) the first EOS, joined by spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .map(|&id| self.token(id).unwrap_or(SPECIAL_TOKENS[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Rebuilds a vocabulary from `(token, count)` pairs in id order.
    pub fn from_entries(entries: Vec<(String, u64)>) -> Result<Self> {
        if entries.len() < NUM_SPECIALS
            || entries
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|((t, _), s)| t != s)
        {
            return Err(Error::Ingestion(format!(
                "vocabulary must start with {SPECIAL_TOKENS:?}"
            )));
        }
        let mut vocab = Self::with_specials();
        for (tok, c) in entries.into_iter().skip(NUM_SPECIALS) {
            if vocab.contains(&tok) {
                return Err(Error::Ingestion(format!("duplicate vocabulary token `{tok}`")));
            }
            vocab.push_unchecked(tok, c);
        }
        Ok(vocab)
    }

    /// Writes `token<TAB>count` lines in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, |w| {
            for (t, c) in self.tokens.iter().zip(&self.counts) {
                writeln!(w, "{t}\t{c}")?;
            }
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let format_err = |message: &str| Error::Format {
                path: path.to_path_buf(),
                line: n + 1,
                message: message.to_string(),
            };
            let (tok, count) = line
                .split_once('\t')
                .ok_or_else(|| format_err("expected `token<TAB>count`"))?;
            let count = count
                .parse::<u64>()
                .map_err(|_| format_err("count is not an unsigned integer"))?;
            entries.push((tok.to_string(), count));
        }
        Self::from_entries(entries)
    }
}

/// Right-padded id grid with per-row lengths (EOS included).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub lengths: Vec<usize>,
    pub pad_mask: Vec<bool>,
    pub max_len: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.max_len..(b + 1) * self.max_len]
    }

    /// Unpadded content of row `b`.
    pub fn sequence(&self, b: usize) -> &[u32] {
        &self.row(b)[..self.lengths[b]]
    }

    pub fn tokens(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Pads sequences to the longest one (or to `pad_to`). Never truncates.
pub fn make_batch<S: AsRef<[u32]>>(sequences: &[S], pad_to: Option<usize>) -> Result<Batch> {
    if sequences.is_empty() {
        return Err(Error::Ingestion("cannot batch an empty collection".into()));
    }
    let longest = sequences.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
    let max_len = match pad_to {
        Some(limit) if longest > limit => {
            return Err(Error::Truncation {
                len: longest,
                limit,
            })
        }
        Some(limit) => limit,
        None => longest,
    };
    if let Some(i) = sequences.iter().position(|s| s.as_ref().is_empty()) {
        return Err(Error::Masking(format!("sequence {i} is empty")));
    }
    let mut ids = vec![PAD; sequences.len() * max_len];
    let mut pad_mask = vec![false; sequences.len() * max_len];
    let mut lengths = Vec::with_capacity(sequences.len());
    for (b, s) in sequences.iter().enumerate() {
        let s = s.as_ref();
        ids[b * max_len..b * max_len + s.len()].copy_from_slice(s);
        pad_mask[b * max_len..b * max_len + s.len()]
            .iter_mut()
            .for_each(|m| *m = true);
        lengths.push(s.len());
    }
    Ok(Batch {
        ids,
        lengths,
        pad_mask,
        max_len,
    })
}

/// Reads a one-sentence-per-line corpus, skipping blank lines.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect();
    if lines.is_empty() {
        return Err(Error::Ingestion(format!("{} has no sentences", path.display())));
    }
    Ok(lines)
}

/// Encodes sentences, dropping those longer than `max_len` ids (EOS included).
/// Returns the kept sequences and the number skipped.
pub fn encode_corpus(vocab: &Vocab, sentences: &[String], max_len: usize) -> (Vec<Vec<u32>>, usize) {
    let mut kept = Vec::with_capacity(sentences.len());
    let mut skipped = 0;
    for s in sentences {
        let ids = vocab.encode(s);
        if ids.len() > max_len {
            skipped += 1;
        } else {
            kept.push(ids);
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} sentences longer than {max_len} tokens");
    }
    (kept, skipped)
}
