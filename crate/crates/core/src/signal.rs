//! Neural signal preprocessing: bandpass filtering, common average
//! reference, temporal binning and per-session z-scoring.
//!
//! Raw recordings are channel-major (`[channels, samples]`); the binning
//! stage transposes to the time-major [`FeatureMatrix`] consumed by the
//! acoustic model.

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Multichannel recording, `samples[[channel, t]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub samples: Array2<f64>,
    pub sample_rate_hz: f64,
}

impl RawRecording {
    pub fn new(samples: Array2<f64>, sample_rate_hz: f64) -> Result<Self> {
        if !(sample_rate_hz > 0.0) || !sample_rate_hz.is_finite() {
            return Err(Error::param(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    /// Build from channel rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>], sample_rate_hz: f64) -> Result<Self> {
        let samples = rows_to_array(rows, "channel")?;
        Self::new(samples, sample_rate_hz)
    }

    pub fn channel_count(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }
}

/// Time-major feature matrix, `values[[t, channel]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    pub frame_rate_hz: f64,
}

impl FeatureMatrix {
    pub fn new(values: Array2<f64>, frame_rate_hz: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("feature matrix contains non-finite values"));
        }
        Ok(Self {
            values,
            frame_rate_hz,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], frame_rate_hz: f64) -> Result<Self> {
        Self::new(rows_to_array(rows, "frame")?, frame_rate_hz)
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn channel_count(&self) -> usize {
        self.values.ncols()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.values.outer_iter().map(|r| r.to_vec()).collect()
    }
}

fn rows_to_array(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != width) {
        return Err(Error::data(format!(
            "{what} {i} has length {} but {what} 0 has {width}",
            r.len()
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), width), flat).map_err(|e| Error::data(e.to_string()))
}

/// One biquad, `b0 + b1 z^-1 + b2 z^-2 / (a0 + a1 z^-1 + a2 z^-2)` with `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        let z2 = z1 * z1;
        (self.b[0] + z1 * self.b[1] + z2 * self.b[2]) / (self.a[0] + z1 * self.a[1] + z2 * self.a[2])
    }

    /// Roots of `z^2 + a1 z + a2`.
    fn poles(&self) -> [Complex64; 2] {
        let (a1, a2) = (self.a[1], self.a[2]);
        let disc = Complex64::new(a1 * a1 - 4.0 * a2, 0.0).sqrt();
        [(-a1 + disc) / 2.0, (-a1 - disc) / 2.0]
    }
}

/// Cascaded second-order-section bandpass filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSos {
    pub sections: Vec<Biquad>,
    pub order: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub sample_rate_hz: f64,
}

/// Design a Butterworth bandpass of prototype order `order` (so `2 * order`
/// poles) via the prewarped bilinear transform.
///
/// Each section carries one conjugate pole pair (or two real poles) and the
/// zeros `z = +1, -1`, and is scaled to unit gain at the geometric band
/// centre, where the analog Butterworth bandpass has `|H| = 1`.
pub fn design_bandpass(order: usize, low_hz: f64, high_hz: f64, sample_rate_hz: f64) -> Result<FilterSos> {
    if order == 0 {
        return Err(Error::param("filter order must be at least 1"));
    }
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < sample_rate_hz / 2.0) {
        return Err(Error::param(format!(
            "invalid band [{low_hz}, {high_hz}] Hz for sample rate {sample_rate_hz} Hz"
        )));
    }
    let fs2 = 2.0 * sample_rate_hz;
    let w_lo = fs2 * (std::f64::consts::PI * low_hz / sample_rate_hz).tan();
    let w_hi = fs2 * (std::f64::consts::PI * high_hz / sample_rate_hz).tan();
    let bw = w_hi - w_lo;
    let w0_sq = w_lo * w_hi;

    // Analog bandpass poles from the lowpass prototype; only the upper
    // half-plane prototype poles are expanded, conjugates are implied.
    let mut complex_poles = Vec::new();
    let mut real_poles = Vec::new();
    for k in 0..order {
        let theta = std::f64::consts::PI * (2 * k + 1 + order) as f64 / (2 * order) as f64;
        let proto = Complex64::from_polar(1.0, theta);
        if proto.im < -1e-12 {
            continue;
        }
        let half = proto * (bw / 2.0);
        let disc = (half * half - w0_sq).sqrt();
        let s1 = half + disc;
        // Product of the two roots is w0^2; avoids cancellation in half - disc.
        let s2 = w0_sq / s1;
        for s in [s1, s2] {
            let z = (fs2 + s) / (fs2 - s);
            if z.im.abs() <= 1e-12 * z.norm().max(1.0) {
                real_poles.push(z.re);
            } else {
                complex_poles.push(if z.im > 0.0 { z } else { z.conj() });
            }
        }
    }
    real_poles.sort_by(f64::total_cmp);

    let mut sections: Vec<Biquad> = complex_poles
        .iter()
        .map(|z| Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -2.0 * z.re, z.norm_sqr()],
        })
        .collect();
    for pair in real_poles.chunks(2) {
        let (p, q) = (pair[0], *pair.get(1).unwrap_or(&0.0));
        sections.push(Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -(p + q), p * q],
        });
    }

    let omega_centre = 2.0 * (w0_sq.sqrt() / fs2).atan();
    for s in &mut sections {
        let g = s.response(omega_centre).norm();
        for b in &mut s.b {
            *b /= g;
        }
        if s.poles().iter().any(|p| p.norm() >= 1.0) {
            return Err(Error::numeric("designed section is unstable"));
        }
    }

    Ok(FilterSos {
        sections,
        order,
        low_hz,
        high_hz,
        sample_rate_hz,
    })
}

impl FilterSos {
    /// Analytic magnitude response at `freq_hz`.
    pub fn magnitude(&self, freq_hz: f64) -> f64 {
        let omega = 2.0 * std::f64::consts::PI * freq_hz / self.sample_rate_hz;
        self.sections
            .iter()
            .map(|s| s.response(omega))
            .fold(Complex64::new(1.0, 0.0), |acc, h| acc * h)
            .norm()
    }

    /// Causal filtering of one signal with zero initial state
    /// (transposed direct form II per section).
    pub fn filter_signal(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            let (mut z1, mut z2) = (0.0, 0.0);
            for v in y.iter_mut() {
                let input = *v;
                let out = s.b[0] * input + z1;
                z1 = s.b[1] * input - s.a[1] * out + z2;
                z2 = s.b[2] * input - s.a[2] * out;
                *v = out;
            }
        }
        y
    }
}

/// Filter every channel of a recording.
pub fn apply_filter(filter: &FilterSos, rec: &RawRecording) -> Result<RawRecording> {
    if rec.is_empty() {
        return Err(Error::data("recording has no samples"));
    }
    let mut out = Array2::zeros(rec.samples.raw_dim());
    for (c, (row, mut dst)) in rec
        .samples
        .outer_iter()
        .zip(out.outer_iter_mut())
        .enumerate()
    {
        let filtered = filter.filter_signal(&row.to_vec());
        if filtered.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("filter output for channel {c} is not finite")));
        }
        dst.assign(&ndarray::ArrayView1::from(&filtered));
    }
    Ok(RawRecording {
        samples: out,
        sample_rate_hz: rec.sample_rate_hz,
    })
}

/// Subtract the cross-channel mean at every time index.
pub fn common_average_reference(x: &Array2<f64>) -> Result<Array2<f64>> {
    if x.nrows() < 2 {
        return Err(Error::param("common average reference needs at least 2 channels"));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty channel axis");
    Ok(x - &mean.insert_axis(Axis(0)))
}

/// Average non-overlapping windows of `bin` samples and transpose to
/// time-major. A trailing partial window is dropped.
pub fn bin_average(x: &Array2<f64>, bin: usize, sample_rate_hz: f64) -> Result<FeatureMatrix> {
    if bin == 0 {
        return Err(Error::param("bin size must be at least 1"));
    }
    let (channels, len) = x.dim();
    if len < bin {
        return Err(Error::data(format!("{len} samples is shorter than one bin of {bin}")));
    }
    let frames = len / bin;
    let mut out = Array2::zeros((frames, channels));
    for (c, row) in x.outer_iter().enumerate() {
        for t in 0..frames {
            let window = row.slice(ndarray::s![t * bin..(t + 1) * bin]);
            // Mean taken relative to the first sample keeps constant windows exact.
            let base = window[0];
            let offset: f64 = window.iter().map(|v| v - base).sum::<f64>() / bin as f64;
            out[[t, c]] = base + offset;
        }
    }
    FeatureMatrix::new(out, sample_rate_hz / bin as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Pooled per-channel mean and population standard deviation over every
/// frame of every matrix (Chan et al. pairwise merge of per-matrix moments).
pub fn compute_session_stats(frames: &[FeatureMatrix]) -> Result<SessionStats> {
    let first = frames
        .first()
        .ok_or_else(|| Error::data("session has no feature matrices"))?;
    let channels = first.channel_count();
    let mut count = 0.0f64;
    let mut mean = vec![0.0; channels];
    let mut m2 = vec![0.0; channels];
    for (i, fm) in frames.iter().enumerate() {
        if fm.channel_count() != channels {
            return Err(Error::data(format!(
                "matrix {i} has {} channels, expected {channels}",
                fm.channel_count()
            )));
        }
        let n_b = fm.frames() as f64;
        if n_b == 0.0 {
            continue;
        }
        for (c, col) in fm.values.axis_iter(Axis(1)).enumerate() {
            let mean_b = col.sum() / n_b;
            let m2_b: f64 = col.iter().map(|v| (v - mean_b).powi(2)).sum();
            let total = count + n_b;
            let delta = mean_b - mean[c];
            mean[c] += delta * n_b / total;
            m2[c] += m2_b + delta * delta * count * n_b / total;
        }
        count += n_b;
    }
    if count == 0.0 {
        return Err(Error::data("session has no frames"));
    }
    let std = m2.iter().map(|v| (v / count).sqrt()).collect();
    Ok(SessionStats { mean, std })
}

pub const DEFAULT_ZSCORE_EPS: f64 = 1e-8;

/// `(x - mean) / max(std, eps)` per channel.
pub fn zscore(frame: &FeatureMatrix, stats: &SessionStats, eps: f64) -> Result<FeatureMatrix> {
    let channels = frame.channel_count();
    if stats.mean.len() != channels || stats.std.len() != channels {
        return Err(Error::data(format!(
            "stats cover {} channels, features have {channels}",
            stats.mean.len()
        )));
    }
    let mut values = frame.values.clone();
    for mut row in values.outer_iter_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v - stats.mean[c]) / stats.std[c].max(eps);
        }
    }
    FeatureMatrix::new(values, frame.frame_rate_hz)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub filter_order: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub frame_rate_hz: f64,
    pub zscore_eps: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            filter_order: 4,
            low_hz: 0.3,
            high_hz: 300.0,
            frame_rate_hz: 50.0,
            zscore_eps: DEFAULT_ZSCORE_EPS,
        }
    }
}

impl PipelineConfig {
    /// Samples per output frame; the sample rate must be an integer
    /// multiple of the frame rate.
    pub fn bin_size(&self, sample_rate_hz: f64) -> Result<usize> {
        let ratio = sample_rate_hz / self.frame_rate_hz;
        let bin = ratio.round();
        if bin < 1.0 || (ratio - bin).abs() > 1e-9 * ratio {
            return Err(Error::param(format!(
                "sample rate {sample_rate_hz} Hz is not an integer multiple of frame rate {} Hz",
                self.frame_rate_hz
            )));
        }
        Ok(bin as usize)
    }
}

/// Filter, re-reference and bin one recording (everything except z-scoring).
pub fn extract_features(rec: &RawRecording, cfg: &PipelineConfig) -> Result<FeatureMatrix> {
    let filter = design_bandpass(cfg.filter_order, cfg.low_hz, cfg.high_hz, rec.sample_rate_hz)?;
    let bin = cfg.bin_size(rec.sample_rate_hz)?;
    let filtered = apply_filter(&filter, rec)?;
    let car = common_average_reference(&filtered.samples)?;
    bin_average(&car, bin, rec.sample_rate_hz)
}

/// Full four-stage pipeline. Without session statistics the recording is
/// normalised by its own statistics.
pub fn preprocess(rec: &RawRecording, stats: Option<&SessionStats>, cfg: &PipelineConfig) -> Result<FeatureMatrix> {
    let features = extract_features(rec, cfg)?;
    match stats {
        Some(s) => zscore(&features, s, cfg.zscore_eps),
        None => {
            let own = compute_session_stats(std::slice::from_ref(&features))?;
            zscore(&features, &own, cfg.zscore_eps)
        }
    }
}
