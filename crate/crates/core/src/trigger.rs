//! Trigger-phoneme analytics: corpus frequencies, the trigger score and
//! Fitts'-law pointing time.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::metrics::ClassPr;
use crate::vocab::Vocabulary;
use crate::{Error, Result};

pub const DEFAULT_TRIGGER_EPS: f64 = 0.001;

/// Relative frequency per class id; `freq[0]` (blank) is always 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencyTable {
    pub freq: Vec<f64>,
    pub token_total: u64,
}

impl FrequencyTable {
    pub fn get(&self, id: u32) -> f64 {
        self.freq.get(id as usize).copied().unwrap_or(0.0)
    }

    pub fn write_csv<W: Write>(&self, vocab: &Vocabulary, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["symbol", "freq"])?;
        for (i, sym) in vocab.symbols().iter().enumerate() {
            out.write_record([sym.clone(), self.get(i as u32 + 1).to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Read `symbol,freq` rows; missing symbols get 0. Values are used as
    /// given, without renormalising.
    pub fn read_csv(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut freq = vec![0.0; vocab.size()];
        for rec in rdr.records() {
            let rec = rec?;
            let sym = rec.get(0).unwrap_or("").trim();
            let id = vocab.id(sym).ok_or_else(|| Error::data(format!("unknown symbol {sym} in frequency CSV")))?;
            let f: f64 = rec
                .get(1)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| Error::data(format!("bad frequency for {sym}")))?;
            if !(f >= 0.0) || !f.is_finite() {
                return Err(Error::data(format!("frequency of {sym} must be finite and non-negative")));
            }
            freq[id as usize] = f;
        }
        Ok(Self { freq, token_total: 0 })
    }
}

pub fn phoneme_frequencies(corpus: &[Vec<u32>], vocab_size: usize) -> Result<FrequencyTable> {
    let mut counts = vec![0u64; vocab_size];
    for &id in corpus.iter().flatten() {
        if id == 0 || id as usize >= vocab_size {
            return Err(Error::data(format!("id {id} is not a phoneme class")));
        }
        counts[id as usize] += 1;
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::data("corpus contains no phonemes"));
    }
    let freq = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(FrequencyTable { freq, token_total: total })
}

/// `P·R / (f + eps)`.
pub fn trigger_score(precision: f64, recall: f64, frequency: f64, eps: f64) -> f64 {
    precision * recall / (frequency + eps)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriggerRow {
    pub rank: usize,
    pub id: u32,
    pub precision: f64,
    pub recall: f64,
    pub frequency: f64,
    pub score: f64,
}

/// Classes by descending score, ties broken by ascending id.
pub fn rank_triggers(pr: &[ClassPr], freq: &FrequencyTable, eps: f64) -> Vec<TriggerRow> {
    let mut rows: Vec<TriggerRow> = pr
        .iter()
        .map(|c| {
            let f = freq.get(c.id);
            TriggerRow {
                rank: 0,
                id: c.id,
                precision: c.precision,
                recall: c.recall,
                frequency: f,
                score: trigger_score(c.precision, c.recall, f, eps),
            }
        })
        .collect();
    rows.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    rows
}

pub fn write_ranking_csv<W: Write>(rows: &[TriggerRow], vocab: &Vocabulary, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["rank", "symbol", "precision", "recall", "frequency", "score"])?;
    for r in rows {
        out.write_record([
            r.rank.to_string(),
            vocab.symbol(r.id).unwrap_or("?").to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.frequency.to_string(),
            r.score.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Fitts' law: `a + b·log2(D/W + 1)`.
pub fn fitts_pointing_time(a: f64, b: f64, distance: f64, width: f64) -> Result<f64> {
    if !(width > 0.0) || !(distance >= 0.0) {
        return Err(Error::param("Fitts' law needs width > 0 and distance >= 0"));
    }
    Ok(a + b * (distance / width + 1.0).log2())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn pr(id: u32, p: f64, r: f64) -> ClassPr {
        ClassPr { id, precision: p, recall: r, precision_defined: true, recall_defined: true, support: 1 }
    }

    #[test]
    fn frequency_examples() {
        let t = phoneme_frequencies(&[vec![1, 1, 2]], 3).unwrap();
        assert!((t.get(1) - 2.0 / 3.0).abs() < 1e-15);
        assert!((t.get(2) - 1.0 / 3.0).abs() < 1e-15);
        assert!((t.freq.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(phoneme_frequencies(&[vec![]], 3).is_err());
    }

    #[test]
    fn frequencies_match_recount() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let corpus: Vec<Vec<u32>> =
                (0..rng.random_range(1..10)).map(|_| (0..rng.random_range(1..20)).map(|_| rng.random_range(1..7)).collect()).collect();
            let t = phoneme_frequencies(&corpus, 7).unwrap();
            let total: usize = corpus.iter().map(Vec::len).sum();
            for c in 1..7u32 {
                let n = corpus.iter().flatten().filter(|&&x| x == c).count();
                assert!((t.get(c) - n as f64 / total as f64).abs() < 1e-12);
            }
            assert!((t.freq.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn score_examples() {
        assert!((trigger_score(1.0, 1.0, 0.0, DEFAULT_TRIGGER_EPS) - 1000.0).abs() < 1e-9);
        assert!((trigger_score(0.9, 0.8, 0.02, DEFAULT_TRIGGER_EPS) - 0.72 / 0.021).abs() < 1e-12);
        assert_eq!(trigger_score(0.0, 0.7, 0.1, DEFAULT_TRIGGER_EPS), 0.0);
    }

    #[test]
    fn rarer_class_ranks_first_on_equal_pr() {
        let f = FrequencyTable { freq: vec![0.0, 0.6, 0.4], token_total: 10 };
        let rows = rank_triggers(&[pr(1, 0.5, 0.5), pr(2, 0.5, 0.5)], &f, DEFAULT_TRIGGER_EPS);
        assert_eq!(rows[0].id, 2);
        assert_eq!((rows[0].rank, rows[1].rank), (1, 2));
    }

    #[test]
    fn fitts_examples() {
        assert!((fitts_pointing_time(0.2, 0.3, 5.0, 5.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(fitts_pointing_time(0.2, 0.3, 0.0, 5.0).unwrap(), 0.2);
        assert!((fitts_pointing_time(0.0, 0.1, 6.0, 2.0).unwrap() - 0.2).abs() < 1e-15);
        assert!(fitts_pointing_time(0.0, 0.1, 1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn scaling_frequencies_keeps_ranking_without_eps(
            entries in proptest::collection::vec((0.01f64..1.0, 0.01f64..1.0, 0.001f64..1.0), 2..10),
            scale in 0.1f64..10.0,
        ) {
            let prs: Vec<ClassPr> = entries.iter().enumerate().map(|(i, e)| pr(i as u32 + 1, e.0, e.1)).collect();
            let mut freq = vec![0.0];
            freq.extend(entries.iter().map(|e| e.2));
            let base = FrequencyTable { freq: freq.clone(), token_total: 0 };
            let scaled = FrequencyTable { freq: freq.iter().map(|f| f * scale).collect(), token_total: 0 };
            let a: Vec<u32> = rank_triggers(&prs, &base, 0.0).iter().map(|r| r.id).collect();
            let b: Vec<u32> = rank_triggers(&prs, &scaled, 0.0).iter().map(|r| r.id).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn score_monotonicity(p in 0.01f64..1.0, r in 0.01f64..1.0, f in 0.0f64..0.9, d in 0.001f64..0.1) {
            let s = trigger_score(p, r, f, DEFAULT_TRIGGER_EPS);
            prop_assert!(trigger_score(p, r, f + d, DEFAULT_TRIGGER_EPS) < s);
            prop_assert!(trigger_score((p + d).min(1.0), r, f, DEFAULT_TRIGGER_EPS) >= s);
            prop_assert!(trigger_score(p * 0.5, r, f, DEFAULT_TRIGGER_EPS) < s);
            prop_assert!(trigger_score(p, r * 0.5, f, DEFAULT_TRIGGER_EPS) < s);
        }
    }
}
