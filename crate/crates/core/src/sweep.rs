//! Grid and seeded random search over beam width, LM weight and length
//! exponent.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctc::LogProbMatrix;
use crate::decoder::{beam_search, BeamConfig, ContextGraph};
use crate::lm::NGramModel;
use crate::metrics::{align, error_rate};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepMode {
    Grid,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub beam_values: Vec<usize>,
    pub lm_weights: Vec<f64>,
    pub length_alphas: Vec<f64>,
    pub mode: SweepMode,
    pub n_random: usize,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            beam_values: vec![32, 64, 128, 256],
            lm_weights: vec![0.5, 0.75, 1.0, 1.25, 1.5],
            length_alphas: vec![0.7, 0.8, 0.9, 1.0, 1.1, 1.2],
            mode: SweepMode::Grid,
            n_random: 20,
            seed: 0,
        }
    }
}

/// One decoder setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub beam: usize,
    pub lm_weight: f64,
    pub length_alpha: f64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.beam_values.is_empty() || self.lm_weights.is_empty() || self.length_alphas.is_empty() {
            return Err(Error::param("sweep value lists must be non-empty"));
        }
        for p in self.grid() {
            BeamConfig { beam_width: p.beam, lm_weight: p.lm_weight, length_alpha: p.length_alpha, nbest: 1 }
                .validate()?;
        }
        if self.mode == SweepMode::Random {
            let distinct = self.distinct_points();
            if self.n_random == 0 || self.n_random > distinct {
                return Err(Error::param(format!(
                    "n_random must lie in 1..={distinct} (number of distinct configurations)"
                )));
            }
        }
        Ok(())
    }

    /// Cartesian product in spec order.
    pub fn grid(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &beam in &self.beam_values {
            for &lm_weight in &self.lm_weights {
                for &length_alpha in &self.length_alphas {
                    out.push(SweepPoint { beam, lm_weight, length_alpha });
                }
            }
        }
        out
    }

    fn distinct_points(&self) -> usize {
        self.grid().iter().map(key).collect::<BTreeSet<_>>().len()
    }

    /// Points to evaluate: the full grid, or `n_random` distinct draws.
    pub fn points(&self) -> Result<Vec<SweepPoint>> {
        self.validate()?;
        match self.mode {
            SweepMode::Grid => Ok(self.grid()),
            SweepMode::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut seen = BTreeSet::new();
                let mut out = Vec::with_capacity(self.n_random);
                while out.len() < self.n_random {
                    let p = SweepPoint {
                        beam: self.beam_values[rng.random_range(0..self.beam_values.len())],
                        lm_weight: self.lm_weights[rng.random_range(0..self.lm_weights.len())],
                        length_alpha: self.length_alphas[rng.random_range(0..self.length_alphas.len())],
                    };
                    // Duplicates are redrawn.
                    if seen.insert(key(&p)) {
                        out.push(p);
                    }
                }
                Ok(out)
            }
        }
    }
}

fn key(p: &SweepPoint) -> (usize, u64, u64) {
    (p.beam, p.lm_weight.to_bits(), p.length_alpha.to_bits())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub beam: usize,
    pub lm_weight: f64,
    pub length_alpha: f64,
    pub per: f64,
    pub accuracy: f64,
    pub mean_latency_ms: f64,
    /// Set when decoding failed for this configuration; `per` and
    /// `accuracy` are then NaN.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepOptions {
    /// Report latency as 0 so output depends only on inputs.
    pub deterministic: bool,
}

fn evaluate(point: &SweepPoint, trials: &[(LogProbMatrix, Vec<u32>)], graph: &ContextGraph<'_>, opts: SweepOptions) -> SweepRow {
    let cfg = BeamConfig { beam_width: point.beam, lm_weight: point.lm_weight, length_alpha: point.length_alpha, nbest: 1 };
    let outcome: Result<(Vec<_>, f64)> = (|| {
        let start = Instant::now();
        let decoded = trials
            .par_iter()
            .map(|(logp, _)| beam_search(logp, graph, &cfg).map(|r| r.best().prefix.clone()))
            .collect::<Result<Vec<_>>>()?;
        let ms = start.elapsed().as_secs_f64() * 1e3 / trials.len() as f64;
        let al: Vec<_> = trials.iter().zip(&decoded).map(|((_, r), h)| align(r, h)).collect();
        Ok((al, ms))
    })();
    let base = SweepRow {
        beam: point.beam,
        lm_weight: point.lm_weight,
        length_alpha: point.length_alpha,
        per: f64::NAN,
        accuracy: f64::NAN,
        mean_latency_ms: 0.0,
        error: None,
    };
    match outcome.and_then(|(al, ms)| Ok((error_rate(&al)?, ms))) {
        Ok((rates, ms)) => SweepRow {
            per: rates.per,
            accuracy: rates.accuracy,
            mean_latency_ms: if opts.deterministic { 0.0 } else { ms },
            ..base
        },
        Err(e) => SweepRow { error: Some(e.to_string()), ..base },
    }
}

/// Accuracy descending; failed rows last; then beam, LM weight and length
/// exponent ascending.
fn row_order(a: &SweepRow, b: &SweepRow) -> std::cmp::Ordering {
    let acc = |r: &SweepRow| if r.accuracy.is_nan() { f64::NEG_INFINITY } else { r.accuracy };
    acc(b)
        .total_cmp(&acc(a))
        .then(a.beam.cmp(&b.beam))
        .then(a.lm_weight.total_cmp(&b.lm_weight))
        .then(a.length_alpha.total_cmp(&b.length_alpha))
}

/// Decode every trial under every configuration and score against the
/// references.
pub fn run_sweep(
    spec: &SweepSpec,
    trials: &[(LogProbMatrix, Vec<u32>)],
    model: &NGramModel,
    opts: SweepOptions,
) -> Result<SweepResult> {
    if trials.is_empty() {
        return Err(Error::data("sweep needs at least one trial"));
    }
    let graph = ContextGraph::new(model);
    let mut rows: Vec<SweepRow> = spec.points()?.iter().map(|p| evaluate(p, trials, &graph, opts)).collect();
    rows.sort_by(row_order);
    Ok(SweepResult { rows })
}

impl SweepResult {
    pub fn top_k(&self, k: usize) -> &[SweepRow] {
        &self.rows[..k.min(self.rows.len())]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["beam", "lm_weight", "length_alpha", "per", "accuracy", "mean_latency_ms"])?;
        for r in &self.rows {
            out.write_record([
                r.beam.to_string(),
                r.lm_weight.to_string(),
                r.length_alpha.to_string(),
                r.per.to_string(),
                r.accuracy.to_string(),
                r.mean_latency_ms.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::greedy_decode;

    fn trials() -> Vec<(LogProbMatrix, Vec<u32>)> {
        let rows = vec![vec![-0.1, -3.0, -3.0], vec![-3.0, -0.1, -3.0], vec![-3.0, -3.0, -0.1]];
        let logp = LogProbMatrix::new(3, 3, rows.concat()).unwrap();
        vec![(logp.clone(), greedy_decode(&logp))]
    }

    #[test]
    fn grid_cardinality() {
        let spec = SweepSpec { beam_values: vec![64, 128], lm_weights: vec![1.0], length_alphas: vec![0.9], ..Default::default() };
        let res = run_sweep(&spec, &trials(), &NGramModel::uniform(3, 3), SweepOptions::default()).unwrap();
        assert_eq!(res.rows.len(), 2);
        assert_eq!(SweepSpec::default().grid().len(), 4 * 5 * 6);
    }

    #[test]
    fn random_mode_draws_distinct_points() {
        let spec = SweepSpec { mode: SweepMode::Random, n_random: 10, seed: 3, beam_values: vec![32, 64], lm_weights: vec![0.5, 1.0], length_alphas: vec![0.7, 0.9, 1.1], };
        let pts = spec.points().unwrap();
        assert_eq!(pts.len(), 10);
        let keys: BTreeSet<_> = pts.iter().map(key).collect();
        assert_eq!(keys.len(), 10);
        assert_eq!(pts, spec.points().unwrap());
        let too_many = SweepSpec { n_random: 13, ..spec };
        assert!(too_many.points().is_err());
    }

    #[test]
    fn top_k_and_determinism() {
        let spec = SweepSpec { beam_values: vec![1, 4], lm_weights: vec![0.0, 1.0], length_alphas: vec![0.9], ..Default::default() };
        let opts = SweepOptions { deterministic: true };
        let lm = NGramModel::uniform(3, 3);
        let a = run_sweep(&spec, &trials(), &lm, opts).unwrap();
        let b = run_sweep(&spec, &trials(), &lm, opts).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a.top_k(1).len(), 1);
        assert_eq!(a.top_k(99).len(), 4);
        // All rows tie on accuracy, so the tie-break orders by beam, then weight.
        assert_eq!((a.rows[0].beam, a.rows[0].lm_weight), (1, 0.0));
        assert_eq!((a.rows[3].beam, a.rows[3].lm_weight), (4, 1.0));
    }

    #[test]
    fn failed_configuration_is_flagged_and_sorted_last() {
        let spec = SweepSpec { beam_values: vec![2], lm_weights: vec![1.0], length_alphas: vec![0.9], ..Default::default() };
        // Model over a different class count makes every decode fail.
        let res = run_sweep(&spec, &trials(), &NGramModel::uniform(3, 5), SweepOptions::default()).unwrap();
        assert!(res.rows[0].error.is_some());
        assert!(res.rows[0].per.is_nan());
    }
}
