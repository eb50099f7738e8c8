//! Connectionist temporal classification: loss via the forward-backward
//! lattice, its gradient, the collapse operator and greedy decoding.

use crate::math::{argmax, log_add, log_softmax_in_place, log_sum_exp};
use crate::vocab::BLANK_ID;
use crate::{Error, Result};

/// Per-frame log-probabilities over the CTC classes, row-major `[frames, classes]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbMatrix {
    frames: usize,
    classes: usize,
    data: Vec<f64>,
}

impl LogProbMatrix {
    /// Wrap values as-is. Entries may be `-inf` but never NaN or `+inf`.
    pub fn new(frames: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if classes == 0 {
            return Err(Error::data("log-prob matrix needs at least one class"));
        }
        if data.len() != frames * classes {
            return Err(Error::data(format!(
                "expected {frames}x{classes} = {} values, got {}",
                frames * classes,
                data.len()
            )));
        }
        if data.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::numeric("log-prob matrix contains NaN or +inf"));
        }
        Ok(Self {
            frames,
            classes,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != classes) {
            return Err(Error::data(format!("frame {i} has {} classes, expected {classes}", rows[i].len())));
        }
        if rows.is_empty() {
            return Err(Error::data("log-prob matrix has no frames"));
        }
        Self::new(rows.len(), classes, rows.concat())
    }

    /// Normalise unnormalised scores with a per-row log-softmax.
    pub fn from_logits(frames: usize, classes: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * classes || classes == 0 {
            return Err(Error::data("logit buffer does not match the requested shape"));
        }
        for row in data.chunks_mut(classes) {
            log_softmax_in_place(row);
        }
        Self::new(frames, classes, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.classes..(t + 1) * self.classes]
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.data[t * self.classes + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.classes)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    /// Largest `|logsumexp(row)|`; zero for exactly normalised rows.
    pub fn max_normalization_error(&self) -> f64 {
        self.rows().map(|r| log_sum_exp(r).abs()).fold(0.0, f64::max)
    }
}

/// Merge adjacent repeats, then drop blanks.
pub fn collapse(path: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &id in path {
        if Some(id) != prev && id != BLANK_ID {
            out.push(id);
        }
        prev = Some(id);
    }
    out
}

/// Minimum number of frames able to emit `target`: one per label plus a
/// separating blank between equal neighbours.
pub fn min_frames(target: &[u32]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Forward/backward variables over the blank-extended target.
///
/// `alpha[t][s]` includes the emission at frame `t`; `beta[t][s]` covers
/// frames `t+1..` only, so `sum_s exp(alpha[t][s] + beta[t][s])` equals the
/// total probability for every `t`.
#[derive(Debug, Clone)]
pub struct CtcLattice {
    pub extended_target: Vec<u32>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    /// Natural-log total probability of the target.
    pub log_likelihood: f64,
}

fn validate_target(logp: &LogProbMatrix, target: &[u32]) -> Result<()> {
    for &id in target {
        if id == BLANK_ID {
            return Err(Error::data("CTC target must not contain the blank id"));
        }
        if id as usize >= logp.classes() {
            return Err(Error::data(format!(
                "target id {id} out of range for {} classes",
                logp.classes()
            )));
        }
    }
    Ok(())
}

impl CtcLattice {
    pub fn compute(logp: &LogProbMatrix, target: &[u32]) -> Result<Self> {
        validate_target(logp, target)?;
        let frames = logp.frames();
        let mut ext = Vec::with_capacity(2 * target.len() + 1);
        ext.push(BLANK_ID);
        for &id in target {
            ext.push(id);
            ext.push(BLANK_ID);
        }
        let states = ext.len();
        let neg = f64::NEG_INFINITY;
        let mut alpha = vec![vec![neg; states]; frames];
        let mut beta = vec![vec![neg; states]; frames];
        if frames == 0 {
            let ll = if target.is_empty() { 0.0 } else { neg };
            return Ok(Self {
                extended_target: ext,
                alpha,
                beta,
                log_likelihood: ll,
            });
        }
        // A transition s-2 -> s skips a blank only between distinct labels.
        let can_skip = |s: usize| s >= 2 && ext[s] != BLANK_ID && ext[s] != ext[s - 2];

        alpha[0][0] = logp.get(0, ext[0] as usize);
        if states > 1 {
            alpha[0][1] = logp.get(0, ext[1] as usize);
        }
        for t in 1..frames {
            for s in 0..states {
                let mut acc = alpha[t - 1][s];
                if s >= 1 {
                    acc = log_add(acc, alpha[t - 1][s - 1]);
                }
                if can_skip(s) {
                    acc = log_add(acc, alpha[t - 1][s - 2]);
                }
                alpha[t][s] = acc + logp.get(t, ext[s] as usize);
            }
        }

        let last = frames - 1;
        beta[last][states - 1] = 0.0;
        if states > 1 {
            beta[last][states - 2] = 0.0;
        }
        for t in (0..last).rev() {
            for s in 0..states {
                let mut acc = beta[t + 1][s] + logp.get(t + 1, ext[s] as usize);
                if s + 1 < states {
                    acc = log_add(acc, beta[t + 1][s + 1] + logp.get(t + 1, ext[s + 1] as usize));
                }
                if s + 2 < states && can_skip(s + 2) {
                    acc = log_add(acc, beta[t + 1][s + 2] + logp.get(t + 1, ext[s + 2] as usize));
                }
                beta[t][s] = acc;
            }
        }

        let mut ll = alpha[last][states - 1];
        if states > 1 {
            ll = log_add(ll, alpha[last][states - 2]);
        }
        Ok(Self {
            extended_target: ext,
            alpha,
            beta,
            log_likelihood: ll,
        })
    }

    /// `log sum_s exp(alpha[t][s] + beta[t][s])` at frame `t`.
    pub fn frame_total(&self, t: usize) -> f64 {
        let terms: Vec<f64> = self.alpha[t]
            .iter()
            .zip(&self.beta[t])
            .map(|(a, b)| a + b)
            .collect();
        log_sum_exp(&terms)
    }
}

/// CTC loss value with a feasibility flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtcLoss {
    /// `-log P(target | logp)`; `+inf` when infeasible.
    pub value: f64,
    /// False when the target needs more frames than are available.
    pub feasible: bool,
}

pub fn ctc_loss(logp: &LogProbMatrix, target: &[u32]) -> Result<CtcLoss> {
    validate_target(logp, target)?;
    if min_frames(target) > logp.frames() {
        return Ok(CtcLoss {
            value: f64::INFINITY,
            feasible: false,
        });
    }
    let lattice = CtcLattice::compute(logp, target)?;
    Ok(CtcLoss {
        value: -lattice.log_likelihood,
        feasible: lattice.log_likelihood.is_finite(),
    })
}

/// Gradient of the CTC loss with respect to the per-frame scores, where
/// the scores pass through a row-wise log-softmax before the loss:
/// `softmax(x)[t][k] - posterior(t, k)`.
///
/// For exactly normalised input the softmax is `exp(logp)` and every row
/// sums to zero.
pub fn ctc_grad(logits: &LogProbMatrix, target: &[u32]) -> Result<Vec<Vec<f64>>> {
    validate_target(logits, target)?;
    if min_frames(target) > logits.frames() {
        return Err(Error::data(format!(
            "target of length {} is infeasible in {} frames",
            target.len(),
            logits.frames()
        )));
    }
    let normalized = LogProbMatrix::from_logits(logits.frames(), logits.classes(), logits.as_slice().to_vec())?;
    let lattice = CtcLattice::compute(&normalized, target)?;
    let ll = lattice.log_likelihood;
    if !ll.is_finite() {
        return Err(Error::numeric("target has zero probability; gradient undefined"));
    }
    let classes = logits.classes();
    let mut grad = Vec::with_capacity(logits.frames());
    for t in 0..logits.frames() {
        let mut occupancy = vec![f64::NEG_INFINITY; classes];
        for (s, &label) in lattice.extended_target.iter().enumerate() {
            let v = lattice.alpha[t][s] + lattice.beta[t][s];
            occupancy[label as usize] = log_add(occupancy[label as usize], v);
        }
        let row: Vec<f64> = (0..classes)
            .map(|k| normalized.get(t, k).exp() - (occupancy[k] - ll).exp())
            .collect();
        grad.push(row);
    }
    Ok(grad)
}

/// Agreement between [`ctc_grad`] and central finite differences of the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_abs_error: f64,
    /// `max |analytic − numeric| / max |numeric|` over all entries.
    pub max_rel_error: f64,
    /// Largest entry-wise `|a − n| / max(|a|, |n|)`; sensitive to round-off
    /// on near-zero entries.
    pub max_entry_rel_error: f64,
}

/// Compare the analytic gradient with central differences of step `h`.
pub fn gradcheck(logits: &LogProbMatrix, target: &[u32], h: f64) -> Result<GradCheck> {
    let analytic = ctc_grad(logits, target)?;
    let (frames, classes) = (logits.frames(), logits.classes());
    let base = logits.as_slice().to_vec();
    let loss_at = |x: Vec<f64>| -> Result<f64> {
        let m = LogProbMatrix::from_logits(frames, classes, x)?;
        Ok(ctc_loss(&m, target)?.value)
    };
    let (mut max_abs, mut max_num, mut max_entry) = (0.0f64, 0.0f64, 0.0f64);
    for t in 0..frames {
        for k in 0..classes {
            let mut up = base.clone();
            let mut down = base.clone();
            up[t * classes + k] += h;
            down[t * classes + k] -= h;
            let numeric = (loss_at(up)? - loss_at(down)?) / (2.0 * h);
            let a = analytic[t][k];
            let err = (a - numeric).abs();
            if !err.is_finite() {
                return Err(Error::numeric("non-finite finite-difference estimate"));
            }
            max_abs = max_abs.max(err);
            max_num = max_num.max(numeric.abs());
            let scale = a.abs().max(numeric.abs());
            if scale > 0.0 {
                max_entry = max_entry.max(err / scale);
            }
        }
    }
    let max_rel = if max_num > 0.0 { max_abs / max_num } else { max_abs };
    Ok(GradCheck { max_abs_error: max_abs, max_rel_error: max_rel, max_entry_rel_error: max_entry })
}

/// Per-frame argmax (ties to the lowest id), then collapse.
pub fn greedy_decode(logp: &LogProbMatrix) -> Vec<u32> {
    collapse(&greedy_path(logp))
}

/// Per-frame argmax path before collapsing.
pub fn greedy_path(logp: &LogProbMatrix) -> Vec<u32> {
    logp.rows().map(|r| argmax(r) as u32).collect()
}

/// Dynamic-programming cell counts for a `frames x labels` problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatticeStats {
    /// Cells of the blank-extended lattice, `frames * (2 * labels + 1)`.
    pub cells: usize,
    /// The simplified `frames * labels` estimate.
    pub simplified: usize,
}

pub fn lattice_stats(frames: usize, labels: usize) -> LatticeStats {
    LatticeStats {
        cells: frames * (2 * labels + 1),
        simplified: frames * labels,
    }
}
