use std::collections::HashMap;

use super::{pack, unpack, BOS, EOS, MAX_ORDER};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountConfig {
    pub order: usize,
    /// Number of CTC classes; phoneme ids are `1..vocab_size`.
    pub vocab_size: usize,
    /// Wrap utterances in `BOS ... EOS`.
    pub sentence_marks: bool,
}

impl CountConfig {
    pub fn new(order: usize, vocab_size: usize) -> Self {
        Self {
            order,
            vocab_size,
            sentence_marks: true,
        }
    }
}

/// Raw and continuation n-gram counts for orders `1..=order`.
#[derive(Debug, Clone)]
pub struct CorpusStats {
    pub config: CountConfig,
    /// `counts[k - 1]`: occurrences of each k-gram.
    pub counts: Vec<HashMap<u128, u64>>,
    /// `continuation[k - 1]` for `k < order`: number of distinct tokens
    /// observed immediately left of each k-gram.
    pub continuation: Vec<HashMap<u128, u64>>,
    /// Number of predicted positions (tokens plus end symbols).
    pub token_total: u64,
}

impl CorpusStats {
    pub fn count(&self, ngram: &[u32]) -> u64 {
        ngram
            .len()
            .checked_sub(1)
            .and_then(|k| self.counts.get(k))
            .and_then(|m| m.get(&pack(ngram)))
            .copied()
            .unwrap_or(0)
    }

    pub fn continuation_count(&self, ngram: &[u32]) -> u64 {
        ngram
            .len()
            .checked_sub(1)
            .and_then(|k| self.continuation.get(k))
            .and_then(|m| m.get(&pack(ngram)))
            .copied()
            .unwrap_or(0)
    }

    /// Counts used by the Kneser-Ney estimator at order `k`: raw counts at
    /// the highest order and for n-grams starting at `BOS` (which cannot be
    /// extended to the left), continuation counts otherwise. Zero entries
    /// are omitted.
    pub fn adjusted_counts(&self, k: usize) -> HashMap<u128, u64> {
        let raw = &self.counts[k - 1];
        if k == self.config.order {
            return raw.clone();
        }
        raw.iter()
            .filter_map(|(&key, &c)| {
                let first = unpack(key)[0];
                let a = if first == BOS {
                    c
                } else {
                    self.continuation[k - 1].get(&key).copied().unwrap_or(0)
                };
                (a > 0).then_some((key, a))
            })
            .collect()
    }

    /// `[n1, n2, n3, n4]`: how many order-`k` n-grams have adjusted count 1..4.
    pub fn counts_of_counts(&self, k: usize) -> [u64; 4] {
        let mut n = [0u64; 4];
        for &a in self.adjusted_counts(k).values() {
            if (1..=4).contains(&a) {
                n[a as usize - 1] += 1;
            }
        }
        n
    }
}

/// Count every n-gram of order `1..=order` in the corpus.
pub fn count_ngrams(corpus: &[Vec<u32>], config: CountConfig) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(Error::data("corpus is empty"));
    }
    if config.order == 0 || config.order > MAX_ORDER {
        return Err(Error::param(format!("order must be in 1..={MAX_ORDER}")));
    }
    if config.vocab_size < 2 {
        return Err(Error::param("vocabulary needs at least one phoneme"));
    }
    let mut counts = vec![HashMap::new(); config.order];
    let mut token_total = 0;
    let mut padded = Vec::new();
    for (i, seq) in corpus.iter().enumerate() {
        if let Some(&bad) = seq.iter().find(|&&t| t == EOS || t as usize >= config.vocab_size) {
            return Err(Error::data(format!("utterance {i}: token id {bad} is not a phoneme id")));
        }
        padded.clear();
        let first_predicted = if config.sentence_marks {
            padded.push(BOS);
            padded.extend_from_slice(seq);
            padded.push(EOS);
            1
        } else {
            padded.extend_from_slice(seq);
            0
        };
        for end in first_predicted..padded.len() {
            token_total += 1;
            for k in 1..=config.order.min(end + 1) {
                let gram = &padded[end + 1 - k..=end];
                *counts[k - 1].entry(pack(gram)).or_insert(0) += 1;
            }
        }
    }
    let mut continuation = vec![HashMap::new(); config.order.saturating_sub(1)];
    for k in 1..config.order {
        for &key in counts[k].keys() {
            let gram = unpack(key);
            *continuation[k - 1].entry(pack(&gram[1..])).or_insert(0) += 1;
        }
    }
    Ok(CorpusStats {
        config,
        counts,
        continuation,
        token_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn bigram_counts() {
        let stats = count_ngrams(&[vec![1, 2], vec![1, 2]], CountConfig::new(2, 3)).unwrap();
        assert_eq!(stats.count(&[1, 2]), 2);
        assert_eq!(stats.count(&[BOS, 1]), 2);
        assert_eq!(stats.count(&[2, EOS]), 2);
        assert_eq!(stats.token_total, 6);
    }

    #[test]
    fn token_total_includes_end_symbols() {
        let corpus = vec![vec![1, 2, 3], vec![], vec![4]];
        let stats = count_ngrams(&corpus, CountConfig::new(3, 5)).unwrap();
        assert_eq!(stats.token_total, 4 + 3);
        let unpadded = CountConfig {
            sentence_marks: false,
            ..CountConfig::new(3, 5)
        };
        assert_eq!(count_ngrams(&corpus, unpadded).unwrap().token_total, 4);
    }

    #[test]
    fn empty_corpus_and_bad_ids() {
        assert!(matches!(count_ngrams(&[], CountConfig::new(2, 3)), Err(Error::Data(_))));
        assert!(matches!(count_ngrams(&[vec![0]], CountConfig::new(2, 3)), Err(Error::Data(_))));
        assert!(matches!(count_ngrams(&[vec![3]], CountConfig::new(2, 3)), Err(Error::Data(_))));
    }

    #[test]
    fn continuation_counts_match_recount() {
        let corpus = vec![vec![1, 2, 3, 1], vec![2, 2, 1], vec![3, 1, 2], vec![1]];
        let stats = count_ngrams(&corpus, CountConfig::new(3, 4)).unwrap();
        // Oracle: collect distinct left neighbours of each token directly.
        for w in [1u32, 2, 3, EOS] {
            let mut left = HashSet::new();
            for seq in &corpus {
                let mut padded = vec![BOS];
                padded.extend(seq);
                padded.push(EOS);
                for pair in padded.windows(2) {
                    if pair[1] == w {
                        left.insert(pair[0]);
                    }
                }
            }
            assert_eq!(stats.continuation_count(&[w]), left.len() as u64, "token {w}");
        }
    }
}
