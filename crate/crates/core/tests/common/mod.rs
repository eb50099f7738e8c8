#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use phonodec::ctc::LogProbMatrix;
use phonodec::lm::{count_ngrams, train_kneser_ney, CountConfig, KnConfig, NGramModel};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub fn phonodec<P: AsRef<std::ffi::OsStr>>(args: &[P]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phonodec"))
        .args(args)
        .output()
        .expect("spawn phonodec")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn random_logp(frames: usize, classes: usize, rng: &mut ChaCha8Rng) -> LogProbMatrix {
    let data = (0..frames * classes).map(|_| rng.random_range(-3.0..3.0)).collect();
    LogProbMatrix::from_logits(frames, classes, data).unwrap()
}

/// Merge repeats, then drop blanks.
pub fn collapse_oracle(path: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != 0 {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// `ln P(target)` by summing every alignment path.
pub fn brute_ctc_logp(logp: &LogProbMatrix, target: &[u32]) -> f64 {
    let (t, v) = (logp.frames(), logp.classes());
    let mut total = 0.0f64;
    let mut path = vec![0u32; t];
    for code in 0..v.pow(t as u32) {
        let mut c = code;
        for p in path.iter_mut() {
            *p = (c % v) as u32;
            c /= v;
        }
        if collapse_oracle(&path) == target {
            let lp: f64 = path.iter().enumerate().map(|(i, &k)| logp.get(i, k as usize)).sum();
            total += lp.exp();
        }
    }
    total.ln()
}

/// Every sequence over `1..classes` of length at most `max_len`.
pub fn all_seqs(max_len: usize, classes: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 1..classes {
                let mut e: Vec<u32> = s.clone();
                e.push(c);
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

pub fn random_corpus(n: usize, classes: usize, max_len: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
    (0..n)
        .map(|_| (0..rng.random_range(1..=max_len)).map(|_| rng.random_range(1..classes as u32)).collect())
        .collect()
}

pub fn train(corpus: &[Vec<u32>], order: usize, classes: usize) -> NGramModel {
    let stats = count_ngrams(corpus, CountConfig::new(order, classes)).unwrap();
    train_kneser_ney(&stats, KnConfig::default()).unwrap()
}

/// Utterances from a peaked first-order Markov chain: each phoneme is
/// followed by its successor `(p mod (V-1)) + 1` with probability 0.8.
pub fn markov_corpus(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
    let k = classes as u32 - 1;
    (0..n)
        .map(|_| {
            let len = rng.random_range(3..=7);
            let mut seq = vec![rng.random_range(1..=k)];
            while seq.len() < len {
                let prev = *seq.last().unwrap();
                let next = if rng.random_bool(0.8) { prev % k + 1 } else { rng.random_range(1..=k) };
                seq.push(next);
            }
            seq
        })
        .collect()
}

/// Softened one-hot emission logits: each token held for `hold` frames,
/// blank frames around and between tokens.
pub fn soft_emissions(seq: &[u32], classes: usize, hold: usize, strength: f64, noise: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut labels = vec![0u32];
    for &s in seq {
        labels.extend(std::iter::repeat_n(s, hold));
        labels.push(0);
    }
    labels
        .into_iter()
        .map(|l| {
            (0..classes)
                .map(|c| if c as u32 == l { strength } else { 0.0 } + rng.random_range(-noise..noise))
                .collect()
        })
        .collect()
}

pub const TOY_SYMBOLS: [&str; 9] = ["A", "B", "C", "D", "E", "F", "G", "H", "I"];

pub fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

pub fn symbols(seq: &[u32]) -> Vec<&'static str> {
    seq.iter().map(|&i| TOY_SYMBOLS[i as usize - 1]).collect()
}

/// Files for a 20-trial, 10-class synthetic dataset whose raw signals carry
/// one channel template per phoneme plus noise.
pub struct MiniDataset {
    pub dir: PathBuf,
    pub vocab: PathBuf,
    pub raw: PathBuf,
    pub refs: PathBuf,
    pub corpus: PathBuf,
    pub model_config: PathBuf,
}

pub const MINI_CHANNELS: usize = 8;

pub fn mini_dataset(dir: &Path, rng: &mut ChaCha8Rng) -> MiniDataset {
    let classes = 10;
    let vocab = dir.join("vocab.txt");
    write_lines(&vocab, TOY_SYMBOLS.iter().map(|s| s.to_string()));

    let corpus = dir.join("corpus.txt");
    write_lines(&corpus, markov_corpus(300, classes, rng).iter().map(|s| symbols(s).join(" ")));

    let fs = 1000.0;
    let bin = 20;
    let frames_per_phone = 8;
    let mut raw_lines = Vec::new();
    let mut ref_lines = Vec::new();
    for (i, seq) in markov_corpus(20, classes, rng).into_iter().enumerate() {
        let mut labels = vec![0u32; 4];
        for &p in &seq {
            labels.extend(std::iter::repeat_n(p, frames_per_phone));
        }
        labels.extend([0u32; 4]);
        let samples: Vec<Vec<f64>> = (0..MINI_CHANNELS)
            .map(|c| {
                labels
                    .iter()
                    .flat_map(|&l| std::iter::repeat_n(l, bin))
                    .map(|l| {
                        let template = if l == 0 { 0.0 } else { (1.3 * l as f64 + 0.7 * c as f64).sin() };
                        template + rng.random_range(-0.5..0.5)
                    })
                    .collect()
            })
            .collect();
        let id = format!("t{i:02}");
        raw_lines.push(
            json!({"session": format!("s{}", i % 2), "trial_id": id, "sample_rate_hz": fs, "samples": samples})
                .to_string(),
        );
        ref_lines.push(json!({"trial_id": id, "symbols": symbols(&seq)}).to_string());
    }
    let raw = dir.join("raw.ndjson");
    write_lines(&raw, raw_lines);
    let refs = dir.join("refs.ndjson");
    write_lines(&refs, ref_lines);

    let model_config = dir.join("model.json");
    let cfg = phonodec::model::ModelConfig { input_dim: MINI_CHANNELS, vocab_size: classes, ..phonodec::model::ModelConfig::tiny() };
    std::fs::write(&model_config, serde_json::to_string(&cfg).unwrap()).unwrap();

    MiniDataset { dir: dir.to_path_buf(), vocab, raw, refs, corpus, model_config }
}

pub fn read_json_lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Writes a Monte Carlo decode set: logits of LM-sampled sequences and
/// their references. Returns (logits path, refs path, arpa path).
pub fn lm_sampled_set(dir: &Path, trials: usize, rng: &mut ChaCha8Rng) -> (PathBuf, PathBuf, PathBuf) {
    let classes = 10;
    let vocab = phonodec::vocab::Vocabulary::from_symbols(TOY_SYMBOLS).unwrap();
    let lm = train(&markov_corpus(1000, classes, rng), 4, classes);
    let arpa = dir.join("mc.arpa");
    phonodec::lm::write_arpa(&lm, &vocab, &arpa).unwrap();
    let mut logit_lines = Vec::new();
    let mut ref_lines = Vec::new();
    let mut n = 0;
    while n < trials {
        let seq = lm.sample(rng, 8);
        if seq.is_empty() {
            continue;
        }
        let id = format!("mc{n:03}");
        let frames = soft_emissions(&seq, classes, 2, 4.0, 1.5, rng);
        logit_lines.push(json!({"trial_id": id, "frames": frames}).to_string());
        ref_lines.push(json!({"trial_id": id, "ids": seq}).to_string());
        n += 1;
    }
    let logits = dir.join("mc_logits.ndjson");
    write_lines(&logits, logit_lines);
    let refs = dir.join("mc_refs.ndjson");
    write_lines(&refs, ref_lines);
    (logits, refs, arpa)
}
