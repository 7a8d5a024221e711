//! Bias lists, training-time phrase sampling and `<sob>`/`<eob>` annotation.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Tokenization, Vocabulary, EOB, NO_BIAS, PAD, SOB};

/// Half-open token range `[start, start + len)` of a reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

/// Ordered phrases `b_0..b_N`; `b_0` is the single-token dummy meaning "no bias".
#[derive(Clone, Debug, PartialEq)]
pub struct BiasList {
    phrases: Vec<Vec<usize>>,
}

impl Default for BiasList {
    fn default() -> Self {
        Self::dummy_only()
    }
}

impl BiasList {
    pub fn dummy_only() -> Self {
        Self {
            phrases: vec![vec![NO_BIAS]],
        }
    }

    /// Builds a list from real phrases (the dummy is prepended). Every
    /// phrase must be non-empty and at most `max_len` tokens long.
    pub fn new(phrases: Vec<Vec<usize>>, max_len: usize) -> Result<Self> {
        let mut all = Vec::with_capacity(phrases.len() + 1);
        all.push(vec![NO_BIAS]);
        for p in phrases {
            if p.is_empty() {
                return Err(Error::EmptyPhrase);
            }
            if p.len() > max_len {
                return Err(Error::PhraseTooLong {
                    len: p.len(),
                    max: max_len,
                });
            }
            all.push(p);
        }
        Ok(Self { phrases: all })
    }

    /// `N + 1`, the number of rows including the dummy.
    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    /// Never true: the dummy is always present.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// `N`, the number of real phrases.
    pub fn num_phrases(&self) -> usize {
        self.phrases.len() - 1
    }

    pub fn phrase(&self, n: usize) -> &[usize] {
        &self.phrases[n]
    }

    pub fn real_phrases(&self) -> &[Vec<usize>] {
        &self.phrases[1..]
    }

    /// Padded width `L_max`: the longest phrase in this list.
    pub fn width(&self) -> usize {
        self.phrases.iter().map(Vec::len).max().unwrap_or(1)
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.phrases.iter().map(Vec::len).collect()
    }

    /// `(N+1) × width` token matrix, row-major, padded with `<pad>`.
    pub fn padded(&self, width: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.phrases.len() * width);
        for p in &self.phrases {
            out.extend_from_slice(&p[..p.len().min(width)]);
            out.extend(std::iter::repeat_n(PAD, width.saturating_sub(p.len())));
        }
        out
    }

    /// Index of the first phrase equal to `tokens`.
    pub fn find(&self, tokens: &[usize]) -> Option<usize> {
        self.phrases
            .iter()
            .skip(1)
            .position(|p| p == tokens)
            .map(|i| i + 1)
    }
}

/// Samples `k ~ U{0..n_utt_max}` non-overlapping spans of the reference,
/// each with length `~ U{2..min(l_max, |reference|)}`, sorted by start.
/// Overlapping draws are redrawn a bounded number of times.
pub fn sample_bias_phrases(
    reference: &[usize],
    seed: u64,
    n_utt_max: usize,
    l_max: usize,
) -> Result<Vec<Span>> {
    if l_max < 2 {
        return Err(Error::Config(format!("l_max must be at least 2, got {l_max}")));
    }
    let n = reference.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(0..=n_utt_max);
    if n < 2 {
        return Ok(Vec::new());
    }
    let max_len = l_max.min(n);
    let mut spans: Vec<Span> = Vec::with_capacity(k);
    for _ in 0..k {
        for _attempt in 0..100 {
            let len = rng.gen_range(2..=max_len);
            let start = rng.gen_range(0..=n - len);
            let cand = Span::new(start, len);
            if spans.iter().all(|s| !s.overlaps(&cand)) {
                spans.push(cand);
                break;
            }
        }
    }
    spans.sort();
    Ok(spans)
}

/// A merged per-batch bias list plus, for each utterance, the list index of
/// each of its own phrases (in the order they were given).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchBiasList {
    pub list: BiasList,
    pub indices: Vec<Vec<usize>>,
}

/// Concatenates the phrases of every utterance after the dummy. With
/// `dedupe`, identical phrases share one entry.
pub fn build_batch_bias_list(
    per_utterance: &[Vec<Vec<usize>>],
    dedupe: bool,
    max_len: usize,
) -> Result<BatchBiasList> {
    let mut phrases: Vec<Vec<usize>> = Vec::new();
    let mut seen: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut indices = Vec::with_capacity(per_utterance.len());
    for utt in per_utterance {
        let mut own = Vec::with_capacity(utt.len());
        for p in utt {
            let idx = match seen.get(p) {
                Some(&i) if dedupe => i,
                _ => {
                    phrases.push(p.clone());
                    let i = phrases.len();
                    seen.entry(p.clone()).or_insert(i);
                    i
                }
            };
            own.push(idx);
        }
        indices.push(own);
    }
    Ok(BatchBiasList {
        list: BiasList::new(phrases, max_len)?,
        indices,
    })
}

/// Annotated reference: `tokens` has `<sob>`/`<eob>` around each biased span
/// and `labels[s]` is the bias index of `tokens[s]` (0 outside any span).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Annotation {
    /// Labels restricted to the positions of the raw reference.
    pub fn raw_position_labels(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .zip(&self.labels)
            .filter(|(t, _)| **t != SOB && **t != EOB)
            .map(|(_, l)| *l)
            .collect()
    }
}

/// Inserts `<sob>`/`<eob>` around each span and labels the span, including
/// its two markers, with the span's phrase index.
pub fn annotate(reference: &[usize], spans: &[(Span, usize)]) -> Result<Annotation> {
    let mut sorted = spans.to_vec();
    sorted.sort_by_key(|(s, _)| *s);
    for (s, idx) in &sorted {
        if s.len == 0 || s.end() > reference.len() {
            return Err(Error::InvalidSpan(format!(
                "[{}, {}) outside reference of length {}",
                s.start,
                s.end(),
                reference.len()
            )));
        }
        if *idx == 0 {
            return Err(Error::InvalidSpan("phrase index must be at least 1".into()));
        }
    }
    for w in sorted.windows(2) {
        let (a, b) = (w[0].0, w[1].0);
        if a.overlaps(&b) {
            return Err(Error::OverlappingSpans {
                a_start: a.start,
                a_end: a.end(),
                b_start: b.start,
                b_end: b.end(),
            });
        }
    }
    let mut tokens = Vec::with_capacity(reference.len() + 2 * sorted.len());
    let mut labels = Vec::with_capacity(tokens.capacity());
    let mut next = sorted.iter().peekable();
    let mut pos = 0;
    while pos < reference.len() {
        match next.peek() {
            Some((span, idx)) if span.start == pos => {
                tokens.push(SOB);
                labels.push(*idx);
                for &t in &reference[span.start..span.end()] {
                    tokens.push(t);
                    labels.push(*idx);
                }
                tokens.push(EOB);
                labels.push(*idx);
                pos = span.end();
                next.next();
            }
            _ => {
                tokens.push(reference[pos]);
                labels.push(0);
                pos += 1;
            }
        }
    }
    Ok(Annotation { tokens, labels })
}

/// Removes every `<sob>`/`<eob>`.
pub fn strip_specials(tokens: &[usize]) -> Vec<usize> {
    tokens
        .iter()
        .copied()
        .filter(|&t| t != SOB && t != EOB)
        .collect()
}

/// Reads a bias list file: UTF-8, one phrase per line, blank lines ignored.
pub fn load_bias_list(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    mode: Tokenization,
    max_len: usize,
) -> Result<BiasList> {
    let text = fs::read_to_string(path)?;
    parse_bias_list(&text, vocab, mode, max_len)
}

pub fn parse_bias_list(
    text: &str,
    vocab: &Vocabulary,
    mode: Tokenization,
    max_len: usize,
) -> Result<BiasList> {
    let mut phrases = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        phrases.push(vocab.encode(line, mode, i + 1)?);
    }
    BiasList::new(phrases, max_len)
}
