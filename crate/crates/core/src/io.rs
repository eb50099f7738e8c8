//! NDJSON record formats shared by the CLI stages.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ctc::LogProbMatrix;
use crate::signal::{FeatureMatrix, RawRecording};
use crate::vocab::Vocabulary;
use crate::{Error, Result};

/// One raw trial; `samples` is channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTrial {
    pub session: String,
    pub trial_id: String,
    pub sample_rate_hz: f64,
    pub samples: Vec<Vec<f64>>,
}

impl RawTrial {
    pub fn recording(&self) -> Result<RawRecording> {
        RawRecording::from_rows(&self.samples, self.sample_rate_hz)
            .map_err(|e| Error::data(format!("trial {}: {e}", self.trial_id)))
    }
}

/// One feature trial; `features` is time-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrial {
    pub session: String,
    pub trial_id: String,
    pub frame_rate_hz: f64,
    pub features: Vec<Vec<f64>>,
}

impl FeatureTrial {
    pub fn matrix(&self) -> Result<FeatureMatrix> {
        FeatureMatrix::from_rows(&self.features, self.frame_rate_hz)
            .map_err(|e| Error::data(format!("trial {}: {e}", self.trial_id)))
    }
}

/// Per-frame log-probabilities (or logits) of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsTrial {
    pub trial_id: String,
    pub frames: Vec<Vec<f64>>,
}

impl LogitsTrial {
    /// Rows are log-softmax normalised on load, so raw logits are accepted.
    pub fn log_probs(&self) -> Result<LogProbMatrix> {
        let classes = self.frames.first().map_or(0, Vec::len);
        if self.frames.iter().any(|r| r.len() != classes) {
            return Err(Error::data(format!("trial {}: ragged frames", self.trial_id)));
        }
        if self.frames.is_empty() || classes == 0 {
            return Err(Error::data(format!("trial {}: no frames", self.trial_id)));
        }
        LogProbMatrix::from_logits(self.frames.len(), classes, self.frames.concat())
            .map_err(|e| Error::data(format!("trial {}: {e}", self.trial_id)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NbestEntry {
    pub ids: Vec<u32>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub trial_id: String,
    pub best: Vec<u32>,
    pub best_symbols: Vec<String>,
    pub score: f64,
    pub nbest: Vec<NbestEntry>,
    pub stage: String,
    pub latency_ms: f64,
}

/// Reference transcription: phoneme ids or symbols, optionally a word-level
/// transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub trial_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ids: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symbols: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl ReferenceRecord {
    pub fn resolve_ids(&self, vocab: &Vocabulary) -> Result<Vec<u32>> {
        match (&self.ids, &self.symbols) {
            (Some(ids), _) => {
                if let Some(&bad) = ids.iter().find(|&&i| i == 0 || i as usize >= vocab.size()) {
                    return Err(Error::data(format!("trial {}: id {bad} is not a phoneme", self.trial_id)));
                }
                Ok(ids.clone())
            }
            (None, Some(syms)) => vocab.encode(syms),
            (None, None) => Err(Error::data(format!("trial {}: reference needs ids or symbols", self.trial_id))),
        }
    }
}

/// Read one JSON value per non-blank line.
pub fn read_ndjson<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_ndjson<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
