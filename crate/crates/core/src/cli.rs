//! `phonodec` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::ctc::{gradcheck, greedy_decode, greedy_path, LogProbMatrix};
use crate::decoder::{beam_search, lm_rescore_greedy, rescore_nbest, BeamConfig, ContextGraph};
use crate::io::{
    read_ndjson, write_ndjson, DecodeRecord, FeatureTrial, LogitsTrial, NbestEntry, RawTrial, ReferenceRecord,
};
use crate::lm::{
    count_ngrams, perplexity, read_arpa, read_corpus, train_kneser_ney, write_arpa, CountConfig, DiscountMode,
    KnConfig,
};
use crate::metrics::{align, confusion, error_rate, precision_recall, wer, words_from_ids, write_pr_csv, ConfusionMatrix};
use crate::model::{init_params, model_forward, param_count, ModelConfig, ModelParams, Tensor};
use crate::signal::{compute_session_stats, extract_features, zscore, PipelineConfig, SessionStats};
use crate::sweep::{run_sweep, SweepOptions, SweepSpec};
use crate::training::{specaugment, AugmentPolicy};
use crate::trigger::{phoneme_frequencies, rank_triggers, write_ranking_csv, FrequencyTable, DEFAULT_TRIGGER_EPS};
use crate::vocab::Vocabulary;
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "phonodec", version, about = "Neural phoneme decoding toolkit")]
struct Cli {
    /// JSON file whose keys mirror flag names; explicit flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter, re-reference, bin and z-score raw recordings.
    Preprocess(PreprocessArgs),
    /// Train an interpolated Kneser-Ney model and write it as ARPA.
    LmTrain(LmTrainArgs),
    /// Write seeded initial model parameters.
    ModelInit(ModelInitArgs),
    /// Run the acoustic model over feature trials.
    ModelForward(ModelForwardArgs),
    /// Print the number of model parameters.
    ParamCount(ParamCountArgs),
    /// Compare the CTC gradient with finite differences on random instances.
    Gradcheck(GradcheckArgs),
    /// Apply SpecAugment masking to feature trials.
    AugmentPreview(AugmentArgs),
    /// Decode log-probabilities into phoneme sequences.
    Decode(DecodeArgs),
    /// Score hypotheses against references.
    Eval(EvalArgs),
    /// Rank trigger-phoneme candidates.
    TriggerRank(TriggerArgs),
    /// Evaluate decoder settings over a grid or random sample.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct VocabArg {
    /// Vocabulary file; defaults to the shipped phoneme set.
    #[arg(long, value_name = "PATH")]
    vocab: Option<PathBuf>,
}

impl VocabArg {
    fn load(&self) -> Result<Vocabulary> {
        match &self.vocab {
            Some(p) => Vocabulary::load(p),
            None => Ok(Vocabulary::default_phonemes()),
        }
    }
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 4)]
    filter_order: usize,
    #[arg(long, default_value_t = 0.3)]
    low_hz: f64,
    #[arg(long, default_value_t = 300.0)]
    high_hz: f64,
    #[arg(long, default_value_t = 50.0)]
    frame_rate_hz: f64,
    /// Also write per-session statistics as JSON.
    #[arg(long)]
    stats_out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct LmTrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 6)]
    order: usize,
    /// Use one fixed discount instead of modified Kneser-Ney discounts.
    #[arg(long)]
    discount: Option<f64>,
    #[command(flatten)]
    vocab: VocabArg,
}

#[derive(Args, Debug)]
struct ModelConfigArg {
    /// Model configuration JSON; defaults to the full-size model.
    #[arg(long, value_name = "PATH")]
    model_config: Option<PathBuf>,
}

impl ModelConfigArg {
    fn load(&self) -> Result<ModelConfig> {
        match &self.model_config {
            Some(p) => ModelConfig::load(p),
            None => Ok(ModelConfig::default()),
        }
    }
}

#[derive(Args, Debug)]
struct ModelInitArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelConfigArg,
}

#[derive(Args, Debug)]
struct ModelForwardArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Parameter file; when absent the model is initialised from --seed.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelConfigArg,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct ParamCountArgs {
    #[command(flatten)]
    model: ModelConfigArg,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 5)]
    frames: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    /// Write the NDJSON report here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    n_time_masks: usize,
    #[arg(long, default_value_t = 100)]
    max_time_width: usize,
    #[arg(long, default_value_t = 2)]
    n_channel_masks: usize,
    #[arg(long, default_value_t = 25)]
    max_channel_width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Stage {
    Greedy,
    Lm,
    Wfst,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Greedy => "greedy",
            Stage::Lm => "lm",
            Stage::Wfst => "wfst",
        }
    }
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = Stage::Wfst)]
    stage: Stage,
    /// ARPA language model (required by the lm and wfst stages).
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    beam: usize,
    #[arg(long, default_value_t = 1.0)]
    lm_weight: f64,
    #[arg(long, default_value_t = 0.9)]
    len_alpha: f64,
    #[arg(long, default_value_t = 0.8)]
    lm_beta: f64,
    #[arg(long, default_value_t = 10)]
    nbest: usize,
    /// Re-rank the wfst n-best list by the stage-2 interpolation.
    #[arg(long)]
    rescore_nbest: bool,
    /// Report latency as 0 so output is byte-identical across runs.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    vocab: VocabArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    hyps: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    /// JSON summary output.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    pr_csv: Option<PathBuf>,
    #[arg(long)]
    confusion_csv: Option<PathBuf>,
    #[command(flatten)]
    vocab: VocabArg,
}

#[derive(Args, Debug)]
struct TriggerArgs {
    #[arg(long)]
    confusion: PathBuf,
    /// Frequency CSV `symbol,freq`.
    #[arg(long, conflicts_with = "corpus", required_unless_present = "corpus")]
    freq: Option<PathBuf>,
    /// Phoneme corpus to derive frequencies from instead of --freq.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TRIGGER_EPS)]
    eps: f64,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    vocab: VocabArg,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    logits: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    deterministic: bool,
    /// Print the best k rows to standard output.
    #[arg(long, default_value_t = 4)]
    top_k: usize,
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    vocab: VocabArg,
}

/// Parse `argv` (program name first), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match merge_config(argv) {
        Ok(a) => a,
        Err(e) => return report(&e),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => report(&e),
    }
}

fn report(e: &Error) -> i32 {
    eprintln!("error: {e}");
    exit_code(e)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Param(_) => 1,
        Error::Numeric(_) => 3,
        Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 2,
    }
}

/// Append flags from a `--config` JSON file unless given on the command line.
fn merge_config(mut argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let pos = argv.iter().position(|a| a == "--config" || a.to_string_lossy().starts_with("--config="));
    let Some(pos) = pos else { return Ok(argv) };
    let arg = argv[pos].to_string_lossy().into_owned();
    let path = match arg.strip_prefix("--config=") {
        Some(p) => p.to_owned(),
        None => argv
            .get(pos + 1)
            .map(|p| p.to_string_lossy().into_owned())
            .ok_or_else(|| Error::param("--config needs a path"))?,
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::data(format!("cannot read config {path}: {e}")))?;
    let map: BTreeMap<String, serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("config {path}: {e}")))?;
    let present: Vec<String> = argv
        .iter()
        .filter_map(|a| a.to_str())
        .filter(|a| a.starts_with("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_owned())
        .collect();
    for (key, value) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag == "--config" || present.contains(&flag) {
            continue;
        }
        match value {
            serde_json::Value::Bool(true) => argv.push(flag.into()),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::String(s) => {
                argv.push(flag.into());
                argv.push(s.into());
            }
            serde_json::Value::Number(n) => {
                argv.push(flag.into());
                argv.push(n.to_string().into());
            }
            other => return Err(Error::data(format!("config key {key}: unsupported value {other}"))),
        }
    }
    Ok(argv)
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match jobs {
        None => f(),
        Some(0) => Err(Error::param("--jobs must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::param(format!("thread pool: {e}")))?
            .install(f),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::data(format!("{} does not exist", path.display())))
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::LmTrain(a) => cmd_lm_train(a),
        Command::ModelInit(a) => cmd_model_init(a),
        Command::ModelForward(a) => cmd_model_forward(a),
        Command::ParamCount(a) => {
            let cfg = a.model.load()?;
            cfg.validate()?;
            println!("{}", param_count(&cfg));
            Ok(())
        }
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::AugmentPreview(a) => cmd_augment(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::TriggerRank(a) => cmd_trigger(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    require_file(&a.input)?;
    let cfg = PipelineConfig {
        filter_order: a.filter_order,
        low_hz: a.low_hz,
        high_hz: a.high_hz,
        frame_rate_hz: a.frame_rate_hz,
        ..Default::default()
    };
    let trials: Vec<RawTrial> = read_ndjson(&a.input)?;
    if trials.is_empty() {
        return Err(Error::data(format!("no trials in {}", a.input.display())));
    }
    with_jobs(a.jobs, || {
        let features = trials
            .par_iter()
            .map(|t| extract_features(&t.recording()?, &cfg).map_err(|e| annotate(e, &t.trial_id)))
            .collect::<Result<Vec<_>>>()?;
        // Statistics pool every trial of a session.
        let mut sessions: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, t) in trials.iter().enumerate() {
            sessions.entry(&t.session).or_default().push(i);
        }
        let mut stats: BTreeMap<String, SessionStats> = BTreeMap::new();
        for (s, idx) in &sessions {
            let group: Vec<_> = idx.iter().map(|&i| features[i].clone()).collect();
            stats.insert((*s).to_owned(), compute_session_stats(&group)?);
        }
        let out = trials
            .iter()
            .zip(&features)
            .map(|(t, f)| {
                let z = zscore(f, &stats[&t.session], cfg.zscore_eps)?;
                Ok(FeatureTrial {
                    session: t.session.clone(),
                    trial_id: t.trial_id.clone(),
                    frame_rate_hz: z.frame_rate_hz,
                    features: z.to_rows(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_ndjson(&a.output, &out)?;
        if let Some(p) = &a.stats_out {
            std::fs::write(p, serde_json::to_string_pretty(&stats)?)?;
        }
        Ok(())
    })
}

fn annotate(e: Error, trial: &str) -> Error {
    match e {
        Error::Param(m) => Error::Param(format!("trial {trial}: {m}")),
        Error::Data(m) => Error::Data(format!("trial {trial}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("trial {trial}: {m}")),
        other => other,
    }
}

fn cmd_lm_train(a: LmTrainArgs) -> Result<()> {
    require_file(&a.corpus)?;
    let vocab = a.vocab.load()?;
    let corpus = read_corpus(&a.corpus, &vocab)?;
    let stats = count_ngrams(&corpus, CountConfig::new(a.order, vocab.size()))?;
    let discount = match a.discount {
        Some(d) => DiscountMode::Fixed(d),
        None => DiscountMode::Modified,
    };
    let model = train_kneser_ney(&stats, KnConfig { discount, ..Default::default() })?;
    write_arpa(&model, &vocab, &a.output)?;
    #[derive(Serialize)]
    struct Summary {
        order: usize,
        utterances: usize,
        ngrams: Vec<usize>,
        train_perplexity: f64,
    }
    let s = Summary {
        order: a.order,
        utterances: corpus.len(),
        ngrams: model.entry_counts(),
        train_perplexity: perplexity(&model, &corpus)?,
    };
    println!("{}", serde_json::to_string(&s)?);
    Ok(())
}

fn cmd_model_init(a: ModelInitArgs) -> Result<()> {
    let cfg = a.model.load()?;
    let params = init_params(&cfg, a.seed)?;
    params.save(&a.output)?;
    println!("{}", param_count(&cfg));
    Ok(())
}

fn cmd_model_forward(a: ModelForwardArgs) -> Result<()> {
    require_file(&a.input)?;
    let cfg = a.model.load()?;
    let params = match &a.params {
        Some(p) => {
            require_file(p)?;
            let params = ModelParams::load(p)?;
            params.check(&cfg)?;
            params
        }
        None => init_params(&cfg, a.seed)?,
    };
    let trials: Vec<FeatureTrial> = read_ndjson(&a.input)?;
    if trials.is_empty() {
        return Err(Error::data(format!("no trials in {}", a.input.display())));
    }
    with_jobs(a.jobs, || {
        let out = trials
            .par_iter()
            .map(|t| {
                let m = t.matrix()?;
                if m.channel_count() != cfg.input_dim {
                    return Err(Error::data(format!(
                        "trial {}: {} channels, model expects {}",
                        t.trial_id,
                        m.channel_count(),
                        cfg.input_dim
                    )));
                }
                let frames = m.frames();
                let x = Tensor::stack(&[m.values])?;
                let (logp, _) = model_forward(&params, &cfg, &x, &[frames]).map_err(|e| annotate(e, &t.trial_id))?;
                Ok(LogitsTrial { trial_id: t.trial_id.clone(), frames: logp[0].to_rows() })
            })
            .collect::<Result<Vec<_>>>()?;
        write_ndjson(&a.output, &out)
    })
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.classes < 2 || a.frames == 0 || !(a.step > 0.0) {
        return Err(Error::param("gradcheck needs classes >= 2, frames >= 1 and a positive step"));
    }
    #[derive(Serialize)]
    struct Line {
        instance: usize,
        target: Vec<u32>,
        max_abs_error: f64,
        max_rel_error: f64,
        max_entry_rel_error: f64,
    }
    #[derive(Serialize)]
    struct Summary {
        instances: usize,
        max_rel_error: f64,
        max_entry_rel_error: f64,
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut buf = Vec::new();
    let (mut worst, mut worst_entry) = (0.0f64, 0.0f64);
    for i in 0..a.instances {
        let data = (0..a.frames * a.classes).map(|_| rng.random_range(-2.0..2.0)).collect();
        let logits = LogProbMatrix::from_logits(a.frames, a.classes, data)?;
        let target = loop {
            let len = rng.random_range(1..=a.frames.div_ceil(2));
            let t: Vec<u32> = (0..len).map(|_| rng.random_range(1..a.classes as u32)).collect();
            if crate::ctc::min_frames(&t) <= a.frames {
                break t;
            }
        };
        let g = gradcheck(&logits, &target, a.step)?;
        worst = worst.max(g.max_rel_error);
        worst_entry = worst_entry.max(g.max_entry_rel_error);
        let line = Line {
            instance: i,
            target,
            max_abs_error: g.max_abs_error,
            max_rel_error: g.max_rel_error,
            max_entry_rel_error: g.max_entry_rel_error,
        };
        serde_json::to_writer(&mut buf, &line)?;
        buf.push(b'\n');
    }
    let summary = Summary { instances: a.instances, max_rel_error: worst, max_entry_rel_error: worst_entry };
    serde_json::to_writer(&mut buf, &summary)?;
    buf.push(b'\n');
    match &a.output {
        Some(p) => std::fs::write(p, &buf)?,
        None => std::io::stdout().write_all(&buf)?,
    }
    Ok(())
}

fn cmd_augment(a: AugmentArgs) -> Result<()> {
    require_file(&a.input)?;
    #[derive(Serialize)]
    struct Out {
        trial_id: String,
        time_masks: Vec<crate::training::MaskSpan>,
        channel_masks: Vec<crate::training::MaskSpan>,
        features: Vec<Vec<f64>>,
    }
    let trials: Vec<FeatureTrial> = read_ndjson(&a.input)?;
    let mut out = Vec::with_capacity(trials.len());
    for (i, t) in trials.iter().enumerate() {
        let m = t.matrix()?;
        // Widths are clamped so short trials can still be previewed.
        let policy = AugmentPolicy {
            n_time_masks: a.n_time_masks,
            max_time_width: a.max_time_width.min(m.frames()),
            n_channel_masks: a.n_channel_masks,
            max_channel_width: a.max_channel_width.min(m.channel_count()),
            seed: a.seed.wrapping_add(i as u64),
        };
        let (aug, masks) = specaugment(&m, &policy)?;
        out.push(Out {
            trial_id: t.trial_id.clone(),
            time_masks: masks.time,
            channel_masks: masks.channel,
            features: aug.to_rows(),
        });
    }
    write_ndjson(&a.output, &out)
}

fn symbols_of(ids: &[u32], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .map(|&i| vocab.symbol(i).map_or_else(|| format!("<{i}>"), str::to_owned))
        .collect()
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    require_file(&a.input)?;
    let vocab = a.vocab.load()?;
    let cfg = BeamConfig { beam_width: a.beam, lm_weight: a.lm_weight, length_alpha: a.len_alpha, nbest: a.nbest };
    cfg.validate()?;
    if !(0.0..=1.0).contains(&a.lm_beta) {
        return Err(Error::param("--lm-beta must lie in [0, 1]"));
    }
    let lm = match (a.stage, &a.lm) {
        (Stage::Greedy, _) => None,
        (_, Some(p)) => {
            require_file(p)?;
            Some(read_arpa(p, &vocab)?)
        }
        (_, None) => return Err(Error::param(format!("stage {} needs --lm", a.stage.name()))),
    };
    let trials: Vec<LogitsTrial> = read_ndjson(&a.input)?;
    if trials.is_empty() {
        return Err(Error::data(format!("no trials in {}", a.input.display())));
    }
    let graph = lm.as_ref().map(ContextGraph::new);
    let records = with_jobs(a.jobs, || {
        trials
            .par_iter()
            .map(|t| {
                let logp = t.log_probs()?;
                let start = Instant::now();
                let (best, score, nbest) = match a.stage {
                    Stage::Greedy => {
                        let path = greedy_path(&logp);
                        let score = path.iter().enumerate().map(|(i, &c)| logp.get(i, c as usize)).sum();
                        let best = greedy_decode(&logp);
                        (best.clone(), score, vec![NbestEntry { ids: best, score }])
                    }
                    Stage::Lm => {
                        let r = lm_rescore_greedy(&logp, lm.as_ref().expect("lm loaded"), a.lm_beta);
                        (r.ids.clone(), r.score, vec![NbestEntry { ids: r.ids, score: r.score }])
                    }
                    Stage::Wfst => {
                        let res = beam_search(&logp, graph.as_ref().expect("lm loaded"), &cfg)
                            .map_err(|e| annotate(e, &t.trial_id))?;
                        let list: Vec<(Vec<u32>, f64)> = if a.rescore_nbest {
                            rescore_nbest(&res.nbest, a.lm_beta)
                        } else {
                            res.nbest.iter().map(|h| (h.prefix.clone(), h.score)).collect()
                        };
                        let (best, score) = list[0].clone();
                        (best, score, list.into_iter().map(|(ids, score)| NbestEntry { ids, score }).collect())
                    }
                };
                let latency_ms = if a.deterministic { 0.0 } else { start.elapsed().as_secs_f64() * 1e3 };
                Ok(DecodeRecord {
                    trial_id: t.trial_id.clone(),
                    best_symbols: symbols_of(&best, &vocab),
                    best,
                    score,
                    nbest,
                    stage: a.stage.name().to_owned(),
                    latency_ms,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    write_ndjson(&a.output, &records)
}

#[derive(Serialize)]
struct EvalSummary {
    per: f64,
    wer: f64,
    sub: f64,
    del: f64,
    ins: f64,
    n_ref: usize,
    accuracy: f64,
    trials: usize,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    require_file(&a.hyps)?;
    require_file(&a.refs)?;
    let vocab = a.vocab.load()?;
    let hyps: Vec<DecodeRecord> = read_ndjson(&a.hyps)?;
    let refs: Vec<ReferenceRecord> = read_ndjson(&a.refs)?;
    if refs.is_empty() {
        return Err(Error::data(format!("no trials in {}", a.refs.display())));
    }
    let by_id: BTreeMap<&str, &DecodeRecord> = hyps.iter().map(|h| (h.trial_id.as_str(), h)).collect();
    let mut alignments = Vec::with_capacity(refs.len());
    let (mut ref_words, mut hyp_words) = (Vec::new(), Vec::new());
    for r in &refs {
        let h = by_id
            .get(r.trial_id.as_str())
            .ok_or_else(|| Error::data(format!("no hypothesis for trial {}", r.trial_id)))?;
        let ids = r.resolve_ids(&vocab)?;
        alignments.push(align(&ids, &h.best));
        // Hypotheses only carry phonemes, so both sides use SIL-split groups.
        ref_words.push(words_from_ids(&ids, &vocab));
        hyp_words.push(words_from_ids(&h.best, &vocab));
    }
    let rates = error_rate(&alignments)?;
    let word_rate = if ref_words.iter().any(|w| !w.is_empty()) { wer(&ref_words, &hyp_words)? } else { 0.0 };
    let summary = EvalSummary {
        per: rates.per,
        wer: word_rate,
        sub: rates.sub,
        del: rates.del,
        ins: rates.ins,
        n_ref: rates.n_ref,
        accuracy: rates.accuracy,
        trials: refs.len(),
    };
    let json = serde_json::to_string_pretty(&summary)?;
    std::fs::write(&a.output, format!("{json}\n"))?;
    println!("{}", serde_json::to_string(&summary)?);
    let matrix = confusion(&alignments, vocab.size()).map_err(|e| Error::data(format!("confusion: {e}")))?;
    if let Some(p) = &a.pr_csv {
        write_pr_csv(&precision_recall(&matrix), &vocab, std::fs::File::create(p)?)?;
    }
    if let Some(p) = &a.confusion_csv {
        matrix.write_csv(&vocab, std::fs::File::create(p)?)?;
    }
    Ok(())
}

fn cmd_trigger(a: TriggerArgs) -> Result<()> {
    require_file(&a.confusion)?;
    let vocab = a.vocab.load()?;
    if !(a.eps >= 0.0) {
        return Err(Error::param("--eps must be non-negative"));
    }
    let matrix = ConfusionMatrix::read_csv(&a.confusion, &vocab)?;
    let freq = match (&a.freq, &a.corpus) {
        (Some(p), _) => {
            require_file(p)?;
            FrequencyTable::read_csv(p, &vocab)?
        }
        (None, Some(p)) => {
            require_file(p)?;
            phoneme_frequencies(&read_corpus(p, &vocab)?, vocab.size())?
        }
        (None, None) => return Err(Error::param("need --freq or --corpus")),
    };
    let rows = rank_triggers(&precision_recall(&matrix), &freq, a.eps);
    write_ranking_csv(&rows, &vocab, std::fs::File::create(&a.output)?)
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    for p in [&a.spec, &a.logits, &a.refs, &a.lm] {
        require_file(p)?;
    }
    let vocab = a.vocab.load()?;
    let spec: SweepSpec = serde_json::from_str(&std::fs::read_to_string(&a.spec)?)?;
    spec.validate()?;
    let model = read_arpa(&a.lm, &vocab)?;
    let logits: Vec<LogitsTrial> = read_ndjson(&a.logits)?;
    let refs: Vec<ReferenceRecord> = read_ndjson(&a.refs)?;
    let by_id: BTreeMap<&str, &ReferenceRecord> = refs.iter().map(|r| (r.trial_id.as_str(), r)).collect();
    let trials = logits
        .iter()
        .map(|t| {
            let r = by_id
                .get(t.trial_id.as_str())
                .ok_or_else(|| Error::data(format!("no reference for trial {}", t.trial_id)))?;
            Ok((t.log_probs()?, r.resolve_ids(&vocab)?))
        })
        .collect::<Result<Vec<_>>>()?;
    if trials.is_empty() {
        return Err(Error::data(format!("no trials in {}", a.logits.display())));
    }
    let result = with_jobs(a.jobs, || run_sweep(&spec, &trials, &model, SweepOptions { deterministic: a.deterministic }))?;
    result.write_csv(std::fs::File::create(&a.output)?)?;
    let mut out = Vec::new();
    let top = crate::sweep::SweepResult { rows: result.top_k(a.top_k).to_vec() };
    top.write_csv(&mut out)?;
    std::io::stdout().write_all(&out)?;
    Ok(())
}
