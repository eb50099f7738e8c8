//! Phoneme n-gram language model with interpolated Kneser-Ney smoothing.
//!
//! Tokens are vocabulary class ids. Two reserved symbols exist inside the
//! model: [`EOS`] reuses id 0 (the CTC blank never occurs in phoneme text)
//! so a model over a `V`-class vocabulary predicts exactly `V` outcomes,
//! and [`BOS`] only ever appears as the first element of a context.
//!
//! Probabilities are stored and returned as natural logs; the ARPA reader
//! and writer convert to and from log10.

mod arpa;
mod counts;
mod kneser_ney;

use std::collections::HashMap;

use rand::Rng;

pub use arpa::{read_arpa, write_arpa, parse_arpa, format_arpa};
pub use counts::{count_ngrams, CorpusStats, CountConfig};
pub use kneser_ney::{train_kneser_ney, DiscountMode, KnConfig};

use crate::vocab::Vocabulary;
use crate::{Error, Result};

/// Sentence-start context symbol.
pub const BOS: u32 = u32::MAX;
/// Sentence-end outcome.
pub const EOS: u32 = 0;

/// Longest supported n-gram (keys pack 16 bits per token into a `u128`).
pub const MAX_ORDER: usize = 8;

#[inline]
fn token_code(t: u32) -> u128 {
    if t == BOS {
        0xFFFF
    } else {
        t as u128 + 1
    }
}

/// Pack a token sequence into a hash key; every code is non-zero so the
/// length is recoverable.
#[inline]
pub(crate) fn pack(tokens: &[u32]) -> u128 {
    debug_assert!(tokens.len() <= MAX_ORDER);
    tokens.iter().fold(0u128, |k, &t| (k << 16) | token_code(t))
}

pub(crate) fn unpack(mut key: u128) -> Vec<u32> {
    let mut out = Vec::new();
    while key != 0 {
        let code = (key & 0xFFFF) as u32;
        out.push(if code == 0xFFFF { BOS } else { code - 1 });
        key >>= 16;
    }
    out.reverse();
    out
}

/// Backoff n-gram model.
///
/// `probs[k - 1]` maps k-grams to `ln P(w | h)`; `backoffs[k - 1]` maps
/// k-token contexts to `ln gamma(h)`. A query for `(h, w)` returns the stored
/// value at the longest matching order, adding the backoff weights of every
/// context it had to shorten.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    vocab_size: usize,
    probs: Vec<HashMap<u128, f64>>,
    backoffs: Vec<HashMap<u128, f64>>,
    unigram_floor: f64,
}

impl NGramModel {
    pub(crate) fn from_tables(
        order: usize,
        vocab_size: usize,
        probs: Vec<HashMap<u128, f64>>,
        backoffs: Vec<HashMap<u128, f64>>,
        unigram_floor: f64,
    ) -> Self {
        debug_assert_eq!(probs.len(), order);
        debug_assert_eq!(backoffs.len(), order.saturating_sub(1));
        Self {
            order,
            vocab_size,
            probs,
            backoffs,
            unigram_floor,
        }
    }

    /// Model with no n-grams: every outcome has probability `1 / V`.
    pub fn uniform(order: usize, vocab_size: usize) -> Self {
        Self {
            order,
            vocab_size,
            probs: vec![HashMap::new(); order],
            backoffs: vec![HashMap::new(); order.saturating_sub(1)],
            unigram_floor: -(vocab_size as f64).ln(),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of outcomes: `EOS` plus the `V - 1` phoneme ids.
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn is_empty(&self) -> bool {
        self.probs.iter().all(HashMap::is_empty)
    }

    /// Every token the model can predict, `EOS` first.
    pub fn outcomes(&self) -> impl Iterator<Item = u32> {
        0..self.vocab_size as u32
    }

    /// Number of stored entries per order.
    pub fn entry_counts(&self) -> Vec<usize> {
        (1..=self.order).map(|k| self.ngrams_of_order(k).len()).collect()
    }

    /// Natural-log probability of `token` after `context` (most recent
    /// token last). Only the last `order - 1` context tokens are used.
    pub fn logprob(&self, token: u32, context: &[u32]) -> f64 {
        let keep = self.order.saturating_sub(1).min(context.len());
        let mut ctx = &context[context.len() - keep..];
        let mut acc = 0.0;
        let mut gram: Vec<u32> = Vec::with_capacity(keep + 1);
        loop {
            gram.clear();
            gram.extend_from_slice(ctx);
            gram.push(token);
            if let Some(p) = self.probs[gram.len() - 1].get(&pack(&gram)) {
                return acc + p;
            }
            if ctx.is_empty() {
                return acc + self.unigram_floor;
            }
            if let Some(b) = self.backoffs[ctx.len() - 1].get(&pack(ctx)) {
                acc += b;
            }
            ctx = &ctx[1..];
        }
    }

    /// Stored `ln P` of an exact n-gram (context followed by token).
    pub fn stored_prob(&self, ngram: &[u32]) -> Option<f64> {
        self.probs.get(ngram.len().checked_sub(1)?)?.get(&pack(ngram)).copied()
    }

    /// Stored `ln gamma` of a context.
    pub fn stored_backoff(&self, context: &[u32]) -> Option<f64> {
        self.backoffs.get(context.len().checked_sub(1)?)?.get(&pack(context)).copied()
    }

    /// All contexts carrying a backoff weight, sorted.
    pub fn contexts(&self) -> Vec<Vec<u32>> {
        let mut out: Vec<Vec<u32>> = self
            .backoffs
            .iter()
            .flat_map(|m| m.keys().map(|&k| unpack(k)))
            .collect();
        out.sort();
        out
    }

    /// Stored n-grams of one order (with probability or backoff), sorted.
    pub fn ngrams_of_order(&self, k: usize) -> Vec<Vec<u32>> {
        let mut keys: Vec<u128> = self.probs[k - 1].keys().copied().collect();
        if k < self.order {
            keys.extend(self.backoffs[k - 1].keys().filter(|key| !self.probs[k - 1].contains_key(key)));
        }
        let mut out: Vec<Vec<u32>> = keys.into_iter().map(unpack).collect();
        out.sort();
        out
    }

    pub fn unigram_floor(&self) -> f64 {
        self.unigram_floor
    }

    /// Draw one utterance (without `EOS`) by ancestral sampling, stopping
    /// at `EOS` or after `max_len` tokens.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, max_len: usize) -> Vec<u32> {
        let mut history = vec![BOS];
        let mut out = Vec::new();
        while out.len() < max_len {
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let mut pick = None;
            for w in self.outcomes() {
                cum += self.logprob(w, &history).exp();
                if u < cum {
                    pick = Some(w);
                    break;
                }
            }
            // Rounding can leave u just above the final cumulative sum.
            let w = pick.unwrap_or(self.vocab_size as u32 - 1);
            if w == EOS {
                break;
            }
            out.push(w);
            history.push(w);
        }
        out
    }
}

/// `ln P(token | context)`: recursive backoff through shorter contexts.
pub fn lm_logprob(model: &NGramModel, token: u32, context: &[u32]) -> f64 {
    model.logprob(token, context)
}

/// Perplexity over a corpus, scoring every token plus the end symbol with
/// sentence-start-padded histories.
pub fn perplexity(model: &NGramModel, corpus: &[Vec<u32>]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::data("perplexity needs a non-empty corpus"));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for seq in corpus {
        let mut history = vec![BOS];
        for &w in seq.iter().chain(std::iter::once(&EOS)) {
            total += model.logprob(w, &history);
            n += 1;
            history.push(w);
        }
    }
    Ok((-total / n as f64).exp())
}

/// Log-linear interpolation of acoustic and language model scores,
/// `(1 - beta) * am + beta * lm`.
pub fn rescore_interpolate(am_logp: f64, lm_logp: f64, beta: f64) -> f64 {
    (1.0 - beta) * am_logp + beta * lm_logp
}

/// Read a phoneme corpus: one utterance per line, whitespace-separated symbols.
pub fn read_corpus(path: impl AsRef<std::path::Path>, vocab: &Vocabulary) -> Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_corpus(&text, vocab)
}

pub fn parse_corpus(text: &str, vocab: &Vocabulary) -> Result<Vec<Vec<u32>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            vocab
                .encode_line(l)
                .map_err(|e| Error::data(format!("corpus line {}: {e}", i + 1)))
        })
        .collect()
}
