//! Shared-vocabulary construction:
//! intersect two tokenizer vocabularies, count corpus token frequencies with
//! a greedy longest-match tokenizer, select the top-N tokens, and fingerprint
//! the result so adapters and models can verify compatibility at attach time.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default selection size: the top 19,200 most frequent shared tokens.
pub const DEFAULT_TOP_N: usize = 19_200;

/// Current on-disk schema version for [`SharedVocabulary`] files.
pub const VOCAB_FILE_VERSION: u32 = 1;

/// One side of the vocabulary merge: a tokenizer's token -> id map.
#[derive(Debug, Clone)]
pub struct TokenizerVocab {
    pub model_name: String,
    pub entries: BTreeMap<String, u64>,
}

impl TokenizerVocab {
    /// Validates invariants: non-empty unique tokens (map keys are unique by
    /// construction) and unique ids.
    pub fn new(model_name: impl Into<String>, entries: BTreeMap<String, u64>) -> Result<Self> {
        if entries.keys().any(|t| t.is_empty()) {
            return Err(Error::Contract("tokenizer vocab contains an empty token".into()));
        }
        let mut seen = HashSet::with_capacity(entries.len());
        for (&ref token, &id) in &entries {
            if !seen.insert(id) {
                return Err(Error::Contract(format!(
                    "tokenizer vocab has duplicate id {id} (at token {token:?})"
                )));
            }
        }
        Ok(TokenizerVocab {
            model_name: model_name.into(),
            entries,
        })
    }

    /// Loads a `{token: id}` JSON object.
    pub fn load(path: &Path, model_name: impl Into<String>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let entries: BTreeMap<String, u64> = serde_json::from_str(&text)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        TokenizerVocab::new(model_name, entries)
    }
}

/// Tokens present in both vocabularies, each with both ids,
/// ordered by token string ascending (bytewise).
pub fn intersect(a: &TokenizerVocab, b: &TokenizerVocab) -> Vec<(String, u64, u64)> {
    // Merge-join over the two sorted maps.
    let mut out = Vec::new();
    let mut ib = b.entries.iter().peekable();
    for (token, &id_a) in &a.entries {
        while let Some((tb, _)) = ib.peek() {
            if tb.as_str() < token.as_str() {
                ib.next();
            } else {
                break;
            }
        }
        if let Some((tb, &id_b)) = ib.peek() {
            if tb.as_str() == token.as_str() {
                out.push((token.clone(), id_a, id_b));
            }
        }
    }
    out
}

/// A token set prepared for greedy longest-match lookup.
#[derive(Debug, Clone)]
pub struct TokenSet {
    tokens: Vec<String>,
    lookup: HashSet<Vec<u8>>,
    max_len: usize,
}

impl TokenSet {
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list: Vec<String> = tokens.into_iter().map(Into::into).collect();
        list.sort();
        list.dedup();
        if list.iter().any(|t| t.is_empty()) {
            return Err(Error::Contract("token set contains an empty token".into()));
        }
        let lookup: HashSet<Vec<u8>> = list.iter().map(|t| t.as_bytes().to_vec()).collect();
        let max_len = list.iter().map(|t| t.len()).max().unwrap_or(0);
        Ok(TokenSet {
            tokens: list,
            lookup,
            max_len,
        })
    }

    /// The distinct tokens, ascending.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn contains_bytes(&self, bytes: &[u8]) -> bool {
        self.lookup.contains(bytes)
    }
}

/// Output of [`tokenize_greedy`]: matched tokens (borrowed from the input
/// text) and the count of characters that began no token.
#[derive(Debug, PartialEq, Eq)]
pub struct Tokenization<'a> {
    pub tokens: Vec<&'a str>,
    pub unknown_chars: u64,
}

/// Left-to-right longest-match segmentation over `tokens`.
///
/// At each position the longest matching token wins; characters that begin
/// no token are skipped and counted as unknowns.
pub fn tokenize_greedy<'a>(text: &'a str, tokens: &TokenSet) -> Tokenization<'a> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut unknown_chars = 0u64;
    let mut pos = 0usize;
    while pos < bytes.len() {
        let limit = tokens.max_len.min(bytes.len() - pos);
        let mut matched = 0usize;
        for len in (1..=limit).rev() {
            if tokens.contains_bytes(&bytes[pos..pos + len]) {
                matched = len;
                break;
            }
        }
        if matched > 0 {
            // A token is valid UTF-8, so a byte-exact match starting on a char
            // boundary also ends on one.
            out.push(&text[pos..pos + matched]);
            pos += matched;
        } else {
            unknown_chars += 1;
            // Skip one whole character.
            pos += 1;
            while pos < bytes.len() && !text.is_char_boundary(pos) {
                pos += 1;
            }
        }
    }
    Tokenization {
        tokens: out,
        unknown_chars,
    }
}

/// Frequency-counting result over one corpus stream.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrequencyCount {
    /// Greedy-tokenization occurrence counts. Every token of the counted set
    /// is present, zero-count tokens included.
    pub counts: BTreeMap<String, u64>,
    pub unknown_chars: u64,
    /// 1-based numbers of lines skipped because they were not valid UTF-8.
    pub skipped_lines: Vec<usize>,
}

impl FrequencyCount {
    /// Commutative merge (counts and unknowns add; skipped lines union).
    pub fn merge(mut self, other: FrequencyCount) -> FrequencyCount {
        for (token, count) in other.counts {
            *self.counts.entry(token).or_insert(0) += count;
        }
        self.unknown_chars += other.unknown_chars;
        self.skipped_lines.extend(other.skipped_lines);
        self.skipped_lines.sort_unstable();
        self
    }
}

/// Counts greedy-tokenization occurrences across all lines of a corpus.
///
/// Lines that fail UTF-8 decoding are skipped and reported by 1-based line
/// number. Counting shards lines across worker threads (capped by the
/// `LANGBRIDGE_LAB_THREADS` environment variable) and merges commutatively,
/// so the result is identical at any worker count.
pub fn count_frequencies<R: BufRead>(reader: R, shared_tokens: &TokenSet) -> Result<FrequencyCount> {
    let mut lines: Vec<Vec<u8>> = Vec::new();
    let mut reader = reader;
    loop {
        let mut buf = Vec::new();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|e| Error::io("<corpus stream>", e))?;
        if n == 0 {
            break;
        }
        if buf.last() == Some(&b'\n') {
            buf.pop();
            if buf.last() == Some(&b'\r') {
                buf.pop();
            }
        }
        lines.push(buf);
    }
    Ok(count_lines_with_workers(&lines, shared_tokens, worker_count(lines.len())))
}

/// Deterministic sharded counting core; exposed shape for tests.
fn count_lines_with_workers(lines: &[Vec<u8>], shared_tokens: &TokenSet, workers: usize) -> FrequencyCount {
    let workers = workers.max(1);
    let chunk = lines.len().div_ceil(workers).max(1);
    let mut merged = std::thread::scope(|scope| {
        let handles: Vec<_> = lines
            .chunks(chunk)
            .enumerate()
            .map(|(shard, shard_lines)| {
                scope.spawn(move || {
                    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
                    let mut unknown = 0u64;
                    let mut skipped = Vec::new();
                    for (offset, raw) in shard_lines.iter().enumerate() {
                        let line_no = shard * chunk + offset + 1;
                        let Ok(text) = std::str::from_utf8(raw) else {
                            skipped.push(line_no);
                            continue;
                        };
                        let tk = tokenize_greedy(text, shared_tokens);
                        unknown += tk.unknown_chars;
                        for token in tk.tokens {
                            *counts.entry(token.to_string()).or_insert(0) += 1;
                        }
                    }
                    FrequencyCount {
                        counts,
                        unknown_chars: unknown,
                        skipped_lines: skipped,
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("counting worker panicked"))
            .fold(FrequencyCount::default(), FrequencyCount::merge)
    });
    // Zero-count entries are part of the contract.
    for token in shared_tokens.tokens() {
        merged.counts.entry(token.clone()).or_insert(0);
    }
    merged
}

/// Worker cap: `LANGBRIDGE_LAB_THREADS` if set (minimum 1), else the
/// machine's available parallelism, never more than the number of work items.
fn worker_count(items: usize) -> usize {
    let hw = std::env::var("LANGBRIDGE_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    hw.min(items).max(1)
}

/// One row of a [`SharedVocabulary`]: a token present in both source
/// vocabularies, with both original ids and its corpus frequency.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedVocabEntry {
    pub token: String,
    pub id_a: u64,
    pub id_b: u64,
    pub freq: u64,
}

/// The shared vocabulary: entries sorted by frequency descending (ties by
/// token ascending); an entry's `shared_index` is its position in the list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedVocabulary {
    pub version: u32,
    pub model_a: String,
    pub model_b: String,
    pub entries: Vec<SharedVocabEntry>,
}

impl SharedVocabulary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// SHA-256 (lowercase hex) of the canonical compact JSON serialization.
    /// This is the compatibility token recorded by adapters and models.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("shared vocabulary serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Validates the ordering/content invariants.
    pub fn validate(&self) -> Result<()> {
        for pair in self.entries.windows(2) {
            let (x, y) = (&pair[0], &pair[1]);
            let ordered = y.freq < x.freq || (y.freq == x.freq && y.token > x.token);
            if !ordered {
                return Err(Error::Contract(format!(
                    "shared vocabulary not sorted: {:?} (freq {}) precedes {:?} (freq {})",
                    x.token, x.freq, y.token, y.freq
                )));
            }
        }
        if self.entries.iter().any(|e| e.token.is_empty()) {
            return Err(Error::Contract("shared vocabulary contains an empty token".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        std::fs::write(path, text.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let vocab: SharedVocabulary = serde_json::from_str(&text)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        vocab.validate()?;
        Ok(vocab)
    }
}

/// Result of [`select_top_n`].
#[derive(Debug, Clone)]
pub struct SelectOutcome {
    pub vocabulary: SharedVocabulary,
    /// True when fewer than `n` shared tokens were available, so the full
    /// list was returned.
    pub saturated: bool,
}

/// Selects the top-n intersection tokens by frequency descending,
/// ties broken by token string ascending.
pub fn select_top_n(
    freq: &BTreeMap<String, u64>,
    pairs: &[(String, u64, u64)],
    n: usize,
    model_a: impl Into<String>,
    model_b: impl Into<String>,
) -> Result<SelectOutcome> {
    if n == 0 {
        return Err(Error::Contract("select_top_n requires n >= 1".into()));
    }
    let mut entries: Vec<SharedVocabEntry> = pairs
        .iter()
        .map(|(token, id_a, id_b)| SharedVocabEntry {
            token: token.clone(),
            id_a: *id_a,
            id_b: *id_b,
            freq: freq.get(token).copied().unwrap_or(0),
        })
        .collect();
    entries.sort_by(|x, y| y.freq.cmp(&x.freq).then_with(|| x.token.cmp(&y.token)));
    let saturated = entries.len() < n;
    entries.truncate(n);
    Ok(SelectOutcome {
        vocabulary: SharedVocabulary {
            version: VOCAB_FILE_VERSION,
            model_a: model_a.into(),
            model_b: model_b.into(),
            entries,
        },
        saturated,
    })
}
