use std::collections::{BTreeMap, HashMap};

use super::counts::CorpusStats;
use super::{pack, unpack, NGramModel, EOS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DiscountMode {
    /// One absolute discount for every count.
    Fixed(f64),
    /// Per-order `D1`, `D2`, `D3+` from counts-of-counts, falling back to
    /// a fixed 0.75 when the counts-of-counts are degenerate.
    Modified,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnConfig {
    pub discount: DiscountMode,
    /// Mix the unigram level with a uniform distribution over all outcomes,
    /// giving every token non-zero probability. When false the unigram is
    /// the undiscounted continuation distribution.
    pub interpolate_uniform: bool,
}

impl Default for KnConfig {
    fn default() -> Self {
        Self {
            discount: DiscountMode::Modified,
            interpolate_uniform: true,
        }
    }
}

pub(crate) const FALLBACK_DISCOUNT: f64 = 0.75;

/// Discounts for adjusted counts 1, 2 and 3+.
fn modified_discounts(n: [u64; 4]) -> Option<[f64; 3]> {
    if n.iter().any(|&c| c == 0) {
        return None;
    }
    let [n1, n2, n3, n4] = n.map(|c| c as f64);
    let y = n1 / (n1 + 2.0 * n2);
    let d = [1.0 - 2.0 * y * n2 / n1, 2.0 - 3.0 * y * n3 / n2, 3.0 - 4.0 * y * n4 / n3];
    let valid = d.iter().enumerate().all(|(i, &di)| di > 0.0 && di <= (i + 1) as f64);
    valid.then_some(d)
}

fn discount_for(d: &[f64; 3], count: u64) -> f64 {
    d[(count.min(3) - 1) as usize]
}

/// Estimate an interpolated Kneser-Ney model.
///
/// At each order `k` and context `h`:
/// `P(w|h) = max(a(hw) - D, 0) / c(h) + gamma(h) * P(w | h[1..])` with
/// `gamma(h) = sum_w D(a(hw)) / c(h)` and `c(h) = sum_w a(hw)`, where `a`
/// are the adjusted counts of [`CorpusStats::adjusted_counts`]. The
/// interpolated value is stored for every seen n-gram and `gamma(h)` as the
/// backoff weight of `h`, which is exactly the ARPA backoff semantics.
pub fn train_kneser_ney(stats: &CorpusStats, config: KnConfig) -> Result<NGramModel> {
    let order = stats.config.order;
    let vocab = stats.config.vocab_size;
    if let DiscountMode::Fixed(d) = config.discount {
        if !(0.0..=1.0).contains(&d) {
            return Err(Error::param(format!("fixed discount must be in [0, 1], got {d}")));
        }
    }

    let mut model = NGramModel::uniform(order, vocab);
    let mut probs: Vec<HashMap<u128, f64>> = vec![HashMap::new(); order];
    let mut backoffs: Vec<HashMap<u128, f64>> = vec![HashMap::new(); order.saturating_sub(1)];
    let mut floor = f64::NEG_INFINITY;

    for k in 1..=order {
        let adjusted = stats.adjusted_counts(k);
        let discounts = if k == 1 && !config.interpolate_uniform {
            [0.0; 3]
        } else {
            match config.discount {
                DiscountMode::Fixed(d) => [d; 3],
                DiscountMode::Modified => {
                    modified_discounts(stats.counts_of_counts(k)).unwrap_or([FALLBACK_DISCOUNT; 3])
                }
            }
        };

        // Group by context; BTreeMap keeps the floating-point summation order fixed.
        let mut by_context: BTreeMap<Vec<u32>, Vec<(u32, u64)>> = BTreeMap::new();
        for (&key, &a) in &adjusted {
            let mut gram = unpack(key);
            let w = gram.pop().expect("non-empty n-gram");
            by_context.entry(gram).or_default().push((w, a));
        }

        for (context, mut followers) in by_context {
            followers.sort_unstable();
            let total: u64 = followers.iter().map(|&(_, a)| a).sum();
            let total = total as f64;
            let mass: f64 = followers.iter().map(|&(_, a)| discount_for(&discounts, a)).sum();
            let gamma = mass / total;

            if k == 1 {
                let uniform = gamma / vocab as f64;
                let seen: HashMap<u32, u64> = followers.iter().copied().collect();
                for w in EOS..vocab as u32 {
                    let a = seen.get(&w).copied().unwrap_or(0);
                    let p = if a > 0 {
                        (a as f64 - discount_for(&discounts, a)).max(0.0) / total + uniform
                    } else {
                        uniform
                    };
                    if p > 0.0 {
                        probs[0].insert(pack(&[w]), p.ln());
                    }
                }
                floor = uniform.ln();
                continue;
            }

            backoffs[k - 2].insert(pack(&context), gamma.ln());
            for (w, a) in followers {
                let lower = model.logprob(w, &context[1..]).exp();
                let p = (a as f64 - discount_for(&discounts, a)).max(0.0) / total + gamma * lower;
                let mut gram = context.clone();
                gram.push(w);
                probs[k - 1].insert(pack(&gram), p.ln());
            }
        }
        // Publish finished orders so the next order can query them.
        model = NGramModel::from_tables(order, vocab, probs.clone(), backoffs.clone(), floor);
    }
    Ok(model)
}
