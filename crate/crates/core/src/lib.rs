//! Phoneme decoding from intracortical neural recordings.
//!
//! The crate covers the whole numerical path from raw multichannel
//! recordings to scored phoneme hypotheses:
//!
//! * [`signal`]: Butterworth bandpass (cascaded biquads), common average
//!   reference, 20 ms binning and per-session z-scoring.
//! * [`model`]: deterministic forward pass of a Conformer acoustic model
//!   with a dilated-conv/BiGRU prenet and 8x temporal subsampling.
//! * [`ctc`]: CTC loss, forward-backward gradient and greedy decoding.
//! * [`lm`]: interpolated Kneser-Ney n-gram phoneme language model with
//!   ARPA persistence.
//! * [`decoder`]: CTC prefix beam search over a lazily expanded n-gram
//!   context graph.
//! * [`metrics`], [`trigger`], [`sweep`]: evaluation, trigger-phoneme
//!   ranking and decoder hyperparameter search.
//!
//! The `phonodec` binary wires these together over NDJSON/CSV/ARPA files.

pub mod cli;
pub mod ctc;
pub mod decoder;
mod error;
pub mod io;
pub mod lm;
pub mod math;
pub mod metrics;
pub mod model;
pub mod signal;
pub mod sweep;
pub mod training;
pub mod trigger;
pub mod vocab;

pub use error::{Error, Result};
