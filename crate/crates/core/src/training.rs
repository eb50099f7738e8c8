//! Optimiser, schedule and regularisation pieces of the training recipe,
//! each usable on its own.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::signal::FeatureMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// One bias-corrected AdamW step with decoupled weight decay, in place.
pub fn adamw_step(theta: &mut [f64], grad: &[f64], state: &mut AdamWState, cfg: &AdamWConfig) -> Result<()> {
    if theta.len() != grad.len() || state.m.len() != theta.len() || state.v.len() != theta.len() {
        return Err(Error::param("adamw: parameter, gradient and state lengths differ"));
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        theta[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta[i]);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub eta_max: f64,
    pub eta_min: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { eta_max: 3e-4, eta_min: 0.0, warmup_epochs: 10.0, total_epochs: 200.0 }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.warmup_epochs && self.warmup_epochs < self.total_epochs) {
            return Err(Error::param("need 0 <= warmup_epochs < total_epochs"));
        }
        if self.eta_min > self.eta_max {
            return Err(Error::param("eta_min exceeds eta_max"));
        }
        Ok(())
    }
}

/// Linear warmup then cosine decay; `t` may be fractional. Held at
/// `eta_min` past `total_epochs`.
pub fn cosine_lr(t: f64, cfg: &SchedulerConfig) -> f64 {
    if t < cfg.warmup_epochs {
        return cfg.eta_max * t / cfg.warmup_epochs;
    }
    let span = cfg.total_epochs - cfg.warmup_epochs;
    let frac = ((t - cfg.warmup_epochs) / span).min(1.0);
    cfg.eta_min + 0.5 * (cfg.eta_max - cfg.eta_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Smoothed target distribution: `1 − eps` on the target, `eps/(V−1)` elsewhere.
pub fn label_smooth(target: usize, vocab_size: usize, eps: f64) -> Result<Vec<f64>> {
    if target >= vocab_size || vocab_size < 2 {
        return Err(Error::param(format!("target {target} outside vocabulary of {vocab_size}")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::param("label smoothing eps must lie in [0, 1)"));
    }
    let mut p = vec![eps / (vocab_size - 1) as f64; vocab_size];
    p[target] = 1.0 - eps;
    Ok(p)
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 || max_norm.is_nan() {
        return Err(Error::param("max_norm must be positive"));
    }
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub n_time_masks: usize,
    pub max_time_width: usize,
    pub n_channel_masks: usize,
    pub max_channel_width: usize,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { n_time_masks: 3, max_time_width: 100, n_channel_masks: 2, max_channel_width: 25, seed: 0 }
    }
}

/// A masked span `[start, start + width)` on one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MaskSpan {
    pub start: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AppliedMasks {
    pub time: Vec<MaskSpan>,
    pub channel: Vec<MaskSpan>,
}

fn draw_spans(rng: &mut ChaCha8Rng, count: usize, max_width: usize, dim: usize) -> Vec<MaskSpan> {
    (0..count)
        .map(|_| {
            let width = rng.random_range(0..=max_width);
            let start = rng.random_range(0..=dim - width);
            MaskSpan { start, width }
        })
        .collect()
}

/// SpecAugment-style masking: whole frames and whole channels set to zero.
pub fn specaugment(features: &FeatureMatrix, policy: &AugmentPolicy) -> Result<(FeatureMatrix, AppliedMasks)> {
    let (frames, channels) = (features.frames(), features.channel_count());
    if policy.max_time_width > frames || policy.max_channel_width > channels {
        return Err(Error::param(format!(
            "mask widths ({}, {}) exceed feature dims ({frames}, {channels})",
            policy.max_time_width, policy.max_channel_width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let time = draw_spans(&mut rng, policy.n_time_masks, policy.max_time_width, frames);
    let channel = draw_spans(&mut rng, policy.n_channel_masks, policy.max_channel_width, channels);
    let mut values = features.values.clone();
    for s in &time {
        values.slice_mut(ndarray::s![s.start..s.start + s.width, ..]).fill(0.0);
    }
    for s in &channel {
        values.slice_mut(ndarray::s![.., s.start..s.start + s.width]).fill(0.0);
    }
    let out = FeatureMatrix::new(values, features.frame_rate_hz)?;
    Ok((out, AppliedMasks { time, channel }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use proptest::prelude::*;

    #[test]
    fn adamw_decay_only() {
        let mut th = [1.0];
        let mut st = AdamWState::new(1);
        let cfg = AdamWConfig { lr: 0.1, ..Default::default() };
        adamw_step(&mut th, &[0.0], &mut st, &cfg).unwrap();
        assert_abs_diff_eq!(th[0], 0.999, epsilon = 1e-15);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut th = [0.0];
        let mut st = AdamWState::new(1);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut th, &[1.0], &mut st, &cfg).unwrap();
        assert_abs_diff_eq!(th[0], -0.1, epsilon = 1e-8);
    }

    #[test]
    fn adamw_two_steps_match_scalar_trace() {
        let (b1, b2, eps, wd, lr) = (0.9f64, 0.98f64, 1e-8, 0.01, 0.05);
        let grads = [0.3, -1.2];
        let (mut th, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for (k, g) in grads.iter().enumerate() {
            let t = (k + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            th -= lr * (mh / (vh.sqrt() + eps) + wd * th);
        }
        let mut p = [0.7];
        let mut st = AdamWState::new(1);
        let cfg = AdamWConfig { lr, beta1: b1, beta2: b2, eps, weight_decay: wd };
        for g in grads {
            adamw_step(&mut p, &[g], &mut st, &cfg).unwrap();
        }
        assert_abs_diff_eq!(p[0], th, epsilon = 1e-12);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = SchedulerConfig { eta_max: 3e-4, eta_min: 1e-6, warmup_epochs: 10.0, total_epochs: 100.0 };
        assert_eq!(cosine_lr(0.0, &cfg), 0.0);
        assert_abs_diff_eq!(cosine_lr(10.0, &cfg), 3e-4, epsilon = 1e-18);
        assert_abs_diff_eq!(cosine_lr(100.0, &cfg), 1e-6, epsilon = 1e-18);
        assert_abs_diff_eq!(cosine_lr(5.0, &cfg), 1.5e-4, epsilon = 1e-18);
    }

    #[test]
    fn label_smoothing_examples() {
        let p = label_smooth(3, 42, 0.1).unwrap();
        assert_abs_diff_eq!(p[3], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(p[0], 0.1 / 41.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let one_hot = label_smooth(1, 4, 0.0).unwrap();
        assert_eq!(one_hot, vec![0.0, 1.0, 0.0, 0.0]);
        assert!(label_smooth(4, 4, 0.1).is_err());
    }

    #[test]
    fn clipping_examples() {
        let mut g = vec![vec![3.0, 4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0).unwrap(), 5.0);
        assert_abs_diff_eq!(g[0][0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(g[0][1], 0.8, epsilon = 1e-15);
        let mut small = vec![vec![0.1], vec![0.2]];
        clip_grad_norm(&mut small, 1.0).unwrap();
        assert_eq!(small, vec![vec![0.1], vec![0.2]]);
    }

    fn features(t: usize, c: usize) -> FeatureMatrix {
        FeatureMatrix::new(Array2::from_shape_fn((t, c), |(i, j)| 1.0 + (i * c + j) as f64), 50.0).unwrap()
    }

    #[test]
    fn zero_width_policy_is_identity() {
        let f = features(20, 6);
        let p = AugmentPolicy { max_time_width: 0, max_channel_width: 0, ..Default::default() };
        assert_eq!(specaugment(&f, &p).unwrap().0, f);
    }

    #[test]
    fn masks_only_touch_reported_spans() {
        let f = features(300, 64);
        let p = AugmentPolicy { seed: 11, ..Default::default() };
        let (out, masks) = specaugment(&f, &p).unwrap();
        assert_eq!(specaugment(&f, &p).unwrap().0, out);
        let in_time = |t: usize| masks.time.iter().any(|s| (s.start..s.start + s.width).contains(&t));
        let in_chan = |c: usize| masks.channel.iter().any(|s| (s.start..s.start + s.width).contains(&c));
        let masked_frames = (0..300).filter(|&t| in_time(t)).count();
        let masked_chans = (0..64).filter(|&c| in_chan(c)).count();
        assert!(masked_frames <= 300 && masked_chans <= 50);
        for ((t, c), &v) in out.values.indexed_iter() {
            if in_time(t) || in_chan(c) {
                assert_eq!(v, 0.0);
            } else {
                assert_eq!(v, f.values[[t, c]]);
            }
        }
    }

    proptest! {
        #[test]
        fn adamw_is_identity_without_signal(theta in proptest::collection::vec(-5.0f64..5.0, 1..8), steps in 1usize..4) {
            let mut p = theta.clone();
            let mut st = AdamWState::new(p.len());
            let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
            for _ in 0..steps {
                adamw_step(&mut p, &vec![0.0; theta.len()], &mut st, &cfg).unwrap();
            }
            prop_assert_eq!(p, theta);
        }

        #[test]
        fn schedule_monotone_after_warmup(a in 10.0f64..100.0, b in 10.0f64..100.0) {
            let cfg = SchedulerConfig { total_epochs: 100.0, ..Default::default() };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(cosine_lr(hi, &cfg) <= cosine_lr(lo, &cfg) + 1e-18);
            let eps = 1e-9;
            prop_assert!((cosine_lr(10.0 - eps, &cfg) - cosine_lr(10.0, &cfg)).abs() < 1e-10);
        }

        #[test]
        fn smoothing_is_distribution(v in 2usize..64, t in 0usize..64, eps in 0.0f64..0.999) {
            prop_assume!(t < v);
            let p = label_smooth(t, v, eps).unwrap();
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn clipping_idempotent(g in proptest::collection::vec(-10.0f64..10.0, 1..10), max in 0.1f64..5.0) {
            let mut once = vec![g];
            let n = clip_grad_norm(&mut once, max).unwrap();
            let mut twice = once.clone();
            let n2 = clip_grad_norm(&mut twice, max).unwrap();
            prop_assert!((n2 - n.min(max)).abs() < 1e-9);
            for (a, b) in once[0].iter().zip(&twice[0]) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn masking_never_adds_nonzeros(seed in 0u64..1000) {
            let f = features(40, 10);
            let p = AugmentPolicy { n_time_masks: 3, max_time_width: 10, n_channel_masks: 2, max_channel_width: 3, seed };
            let (out, _) = specaugment(&f, &p).unwrap();
            let nz = |m: &FeatureMatrix| m.values.iter().filter(|v| **v != 0.0).count();
            prop_assert!(nz(&out) <= nz(&f));
        }
    }
}
