//! Stage-3 decoding: CTC prefix beam search over a lazily expanded n-gram
//! context graph.
//!
//! A graph state is the last `order - 1` tokens of the decoded prefix and an
//! edge `(state, token)` carries `ln P_LM(token | state)`. The search keeps
//! at most `K` collapsed prefixes per frame, ranked by
//! `(AM + λ·LM) / n^α` with `n` the prefix length.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss, greedy_path, LogProbMatrix};
use crate::lm::NGramModel;
use crate::math::log_add;
use crate::vocab::BLANK_ID;
use crate::{Error, Result};

/// Lazy view of an n-gram model as a weighted automaton.
#[derive(Debug, Clone, Copy)]
pub struct ContextGraph<'a> {
    model: &'a NGramModel,
}

impl<'a> ContextGraph<'a> {
    pub fn new(model: &'a NGramModel) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &'a NGramModel {
        self.model
    }

    /// Longest history a state keeps.
    pub fn history(&self) -> usize {
        self.model.order().saturating_sub(1)
    }

    pub fn initial_state(&self) -> Vec<u32> {
        Vec::new()
    }

    pub fn next_state(&self, state: &[u32], token: u32) -> Vec<u32> {
        let mut next = state.to_vec();
        next.push(token);
        let h = self.history();
        if next.len() > h {
            next.drain(..next.len() - h);
        }
        next
    }

    pub fn weight(&self, state: &[u32], token: u32) -> f64 {
        self.model.logprob(token, state)
    }
}

/// Sum of edge weights along `seq` from the initial state.
pub fn path_weight(graph: &ContextGraph<'_>, seq: &[u32]) -> f64 {
    let mut state = graph.initial_state();
    let mut total = 0.0;
    for &tok in seq {
        total += graph.weight(&state, tok);
        state = graph.next_state(&state, tok);
    }
    total
}

/// `raw / n^alpha`; the empty hypothesis keeps its raw score.
pub fn length_normalize(raw: f64, n: usize, alpha: f64) -> f64 {
    if n == 0 {
        raw
    } else {
        raw / (n as f64).powf(alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub lm_weight: f64,
    pub length_alpha: f64,
    pub nbest: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam_width: 128, lm_weight: 1.0, length_alpha: 0.9, nbest: 10 }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::param("beam width must be at least 1"));
        }
        if !(self.length_alpha > 0.0 && self.length_alpha <= 2.0) {
            return Err(Error::param("length alpha must lie in (0, 2]"));
        }
        if !(self.lm_weight >= 0.0) || !self.lm_weight.is_finite() {
            return Err(Error::param("lm weight must be finite and non-negative"));
        }
        if self.nbest == 0 {
            return Err(Error::param("nbest must be at least 1"));
        }
        Ok(())
    }
}

fn combined(am: f64, lm: f64, n: usize, cfg: &BeamConfig) -> f64 {
    // Skipping the LM term at λ = 0 keeps an infinite LM cost from turning into NaN.
    let raw = if cfg.lm_weight == 0.0 { am } else { am + cfg.lm_weight * lm };
    length_normalize(raw, n, cfg.length_alpha)
}

/// Combined, length-normalised score of one complete collapsed sequence;
/// the AM term sums over all CTC alignments. Infeasible sequences score −∞.
pub fn score_sequence(graph: &ContextGraph<'_>, logp: &LogProbMatrix, seq: &[u32], cfg: &BeamConfig) -> Result<f64> {
    let loss = ctc_loss(logp, seq)?;
    if !loss.feasible {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(combined(-loss.value, path_weight(graph, seq), seq.len(), cfg))
}

/// Order used everywhere hypotheses are ranked: higher score first, then
/// shorter, then lexicographically smaller ids.
pub fn rank_order(a_score: f64, a: &[u32], b_score: f64, b: &[u32]) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then(a.len().cmp(&b.len()))
        .then_with(|| a.cmp(b))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hypothesis {
    pub prefix: Vec<u32>,
    pub logp_blank: f64,
    pub logp_nonblank: f64,
    pub lm_score: f64,
    pub score: f64,
}

impl Hypothesis {
    pub fn am_score(&self) -> f64 {
        log_add(self.logp_blank, self.logp_nonblank)
    }

    pub fn lm_state(&self, graph: &ContextGraph<'_>) -> Vec<u32> {
        let h = graph.history().min(self.prefix.len());
        self.prefix[self.prefix.len() - h..].to_vec()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SearchStats {
    pub frames: usize,
    /// Candidate extensions scored (blank and every non-blank token, per
    /// retained hypothesis per frame).
    pub scorings: u64,
    /// Largest number of distinct prefixes alive after merging at any frame.
    pub max_live: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeamResult {
    pub nbest: Vec<Hypothesis>,
    pub stats: SearchStats,
}

impl BeamResult {
    pub fn best(&self) -> &Hypothesis {
        &self.nbest[0]
    }
}

struct Node {
    parent: u32,
    token: u32,
    len: usize,
    lm: f64,
    state: Vec<u32>,
}

struct Trie<'g, 'm> {
    nodes: Vec<Node>,
    children: HashMap<(u32, u32), u32>,
    graph: &'g ContextGraph<'m>,
}

impl<'g, 'm> Trie<'g, 'm> {
    fn new(graph: &'g ContextGraph<'m>) -> Self {
        let root = Node { parent: u32::MAX, token: BLANK_ID, len: 0, lm: 0.0, state: graph.initial_state() };
        Self { nodes: vec![root], children: HashMap::new(), graph }
    }

    fn child(&mut self, parent: u32, token: u32) -> u32 {
        if let Some(&c) = self.children.get(&(parent, token)) {
            return c;
        }
        let p = &self.nodes[parent as usize];
        let node = Node {
            parent,
            token,
            len: p.len + 1,
            lm: p.lm + self.graph.weight(&p.state, token),
            state: self.graph.next_state(&p.state, token),
        };
        let id = self.nodes.len() as u32;
        self.nodes.push(node);
        self.children.insert((parent, token), id);
        id
    }

    fn ids(&self, mut node: u32) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.nodes[node as usize].len);
        while node != 0 {
            out.push(self.nodes[node as usize].token);
            node = self.nodes[node as usize].parent;
        }
        out.reverse();
        out
    }

    /// Lexicographic comparison of two prefixes of equal length.
    fn cmp_ids(&self, a: u32, b: u32) -> Ordering {
        if a == b {
            Ordering::Equal
        } else {
            self.ids(a).cmp(&self.ids(b))
        }
    }
}

#[derive(Clone, Copy)]
struct Entry {
    node: u32,
    pb: f64,
    pnb: f64,
    score: f64,
}

/// Frame-synchronous CTC prefix beam search with n-gram edge weights.
pub fn beam_search(logp: &LogProbMatrix, graph: &ContextGraph<'_>, cfg: &BeamConfig) -> Result<BeamResult> {
    cfg.validate()?;
    if logp.classes() != graph.model().vocab_size() {
        return Err(Error::param(format!(
            "emission matrix has {} classes, language model {}",
            logp.classes(),
            graph.model().vocab_size()
        )));
    }
    let classes = logp.classes();
    let mut trie = Trie::new(graph);
    let neg = f64::NEG_INFINITY;
    let mut beam = vec![Entry { node: 0, pb: 0.0, pnb: neg, score: 0.0 }];
    let mut stats = SearchStats { frames: logp.frames(), scorings: 0, max_live: 1 };

    let rank = |trie: &Trie, a: &Entry, b: &Entry| {
        b.score
            .total_cmp(&a.score)
            .then(trie.nodes[a.node as usize].len.cmp(&trie.nodes[b.node as usize].len))
            .then_with(|| trie.cmp_ids(a.node, b.node))
    };

    for t in 0..logp.frames() {
        let row = logp.row(t);
        let mut next: Vec<Entry> = Vec::with_capacity(beam.len() * classes);
        let mut slot: HashMap<u32, usize> = HashMap::with_capacity(beam.len() * classes);
        let mut add = |next: &mut Vec<Entry>, node: u32, pb: f64, pnb: f64| match slot.get(&node) {
            Some(&i) => {
                next[i].pb = log_add(next[i].pb, pb);
                next[i].pnb = log_add(next[i].pnb, pnb);
            }
            None => {
                slot.insert(node, next.len());
                next.push(Entry { node, pb, pnb, score: neg });
            }
        };
        for h in &beam {
            let total = log_add(h.pb, h.pnb);
            let last = trie.nodes[h.node as usize].token;
            let has_last = h.node != 0;
            add(&mut next, h.node, total + row[BLANK_ID as usize], neg);
            if has_last {
                add(&mut next, h.node, neg, h.pnb + row[last as usize]);
            }
            for c in 1..classes as u32 {
                let child = trie.child(h.node, c);
                let mass = if has_last && c == last { h.pb } else { total };
                add(&mut next, child, neg, mass + row[c as usize]);
            }
            stats.scorings += classes as u64;
        }
        // Prefixes no alignment can reach carry no mass; drop them.
        next.retain(|e| e.pb > neg || e.pnb > neg);
        stats.max_live = stats.max_live.max(next.len());
        for e in &mut next {
            let n = &trie.nodes[e.node as usize];
            e.score = combined(log_add(e.pb, e.pnb), n.lm, n.len, cfg);
        }
        if next.len() > cfg.beam_width {
            next.select_nth_unstable_by(cfg.beam_width - 1, |a, b| rank(&trie, a, b));
            next.truncate(cfg.beam_width);
        }
        next.sort_by(|a, b| rank(&trie, a, b));
        beam = next;
    }

    let nbest = beam
        .iter()
        .take(cfg.nbest)
        .map(|e| Hypothesis {
            prefix: trie.ids(e.node),
            logp_blank: e.pb,
            logp_nonblank: e.pnb,
            lm_score: trie.nodes[e.node as usize].lm,
            score: e.score,
        })
        .collect();
    Ok(BeamResult { nbest, stats })
}

/// Upper bound on candidate scorings: `V · K · T`.
pub fn expansion_budget(vocab_size: usize, beam_width: usize, frames: usize) -> u64 {
    (vocab_size * beam_width * frames) as u64
}

/// A decoded sequence with its per-token acoustic and LM terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RescoredSequence {
    pub ids: Vec<u32>,
    pub am_scores: Vec<f64>,
    pub lm_scores: Vec<f64>,
    pub score: f64,
}

/// Stage-2 decoding: the greedy sequence rescored token by token as
/// `Σ ((1 − β)·log P_AM + β·log P_LM)`. A token's AM term is its best frame
/// log-probability inside the greedy run that emitted it.
pub fn lm_rescore_greedy(logp: &LogProbMatrix, model: &NGramModel, beta: f64) -> RescoredSequence {
    let path = greedy_path(logp);
    let mut ids = Vec::new();
    let mut am_scores: Vec<f64> = Vec::new();
    let mut prev = None;
    for (t, &c) in path.iter().enumerate() {
        let lp = logp.get(t, c as usize);
        if c != BLANK_ID && Some(c) == prev {
            let last = am_scores.last_mut().expect("run already started");
            *last = last.max(lp);
        } else if c != BLANK_ID {
            ids.push(c);
            am_scores.push(lp);
        }
        prev = Some(c);
    }
    let mut lm_scores = Vec::with_capacity(ids.len());
    for i in 0..ids.len() {
        lm_scores.push(model.logprob(ids[i], &ids[..i]));
    }
    let score = am_scores
        .iter()
        .zip(&lm_scores)
        .map(|(&a, &l)| crate::lm::rescore_interpolate(a, l, beta))
        .sum();
    RescoredSequence { ids, am_scores, lm_scores, score }
}

/// Re-rank an n-best list by `(1 − β)·AM + β·LM` (no length normalisation).
pub fn rescore_nbest(nbest: &[Hypothesis], beta: f64) -> Vec<(Vec<u32>, f64)> {
    let mut out: Vec<(Vec<u32>, f64)> = nbest
        .iter()
        .map(|h| (h.prefix.clone(), crate::lm::rescore_interpolate(h.am_score(), h.lm_score, beta)))
        .collect();
    out.sort_by(|a, b| rank_order(a.1, &a.0, b.1, &b.0));
    out
}
