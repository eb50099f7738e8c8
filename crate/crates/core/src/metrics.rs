//! Edit-distance alignment, error rates, confusion matrices and per-class
//! precision/recall.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::vocab::{split_on_sil, Vocabulary};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum EditOp<T> {
    Match(T, T),
    Sub(T, T),
    Del(T),
    Ins(T),
}

/// Edit counts; `n_ref` is the reference length.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct EditCounts {
    pub matches: usize,
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
    pub n_ref: usize,
}

impl EditCounts {
    pub fn cost(&self) -> usize {
        self.sub + self.del + self.ins
    }

    pub fn merge(self, o: Self) -> Self {
        Self {
            matches: self.matches + o.matches,
            sub: self.sub + o.sub,
            del: self.del + o.del,
            ins: self.ins + o.ins,
            n_ref: self.n_ref + o.n_ref,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Alignment<T> {
    pub ops: Vec<EditOp<T>>,
    pub counts: EditCounts,
}

/// Minimal unit-cost alignment. Among optimal alignments the backtrace
/// prefers match, then substitution, then deletion, then insertion.
pub fn align<T: PartialEq + Clone>(reference: &[T], hyp: &[T]) -> Alignment<T> {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(del).min(ins);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let mut counts = EditCounts { n_ref: n, ..Default::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                let (r, h) = (reference[i - 1].clone(), hyp[j - 1].clone());
                if same {
                    counts.matches += 1;
                    ops.push(EditOp::Match(r, h));
                } else {
                    counts.sub += 1;
                    ops.push(EditOp::Sub(r, h));
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            counts.del += 1;
            ops.push(EditOp::Del(reference[i - 1].clone()));
            i -= 1;
        } else {
            counts.ins += 1;
            ops.push(EditOp::Ins(hyp[j - 1].clone()));
            j -= 1;
        }
    }
    ops.reverse();
    Alignment { ops, counts }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorRates {
    pub per: f64,
    pub sub: f64,
    pub del: f64,
    pub ins: f64,
    pub accuracy: f64,
    pub n_ref: usize,
}

pub fn error_rate_from_counts(c: EditCounts) -> Result<ErrorRates> {
    if c.n_ref == 0 {
        return Err(Error::data("error rate needs at least one reference token"));
    }
    let n = c.n_ref as f64;
    let (sub, del, ins) = (c.sub as f64 / n, c.del as f64 / n, c.ins as f64 / n);
    let per = sub + del + ins;
    Ok(ErrorRates { per, sub, del, ins, accuracy: 1.0 - per, n_ref: c.n_ref })
}

/// Corpus-level rates: summed edits over summed reference length.
pub fn error_rate<T>(alignments: &[Alignment<T>]) -> Result<ErrorRates> {
    let total = alignments.iter().fold(EditCounts::default(), |a, b| a.merge(b.counts));
    error_rate_from_counts(total)
}

/// Word tokens of a phoneme sequence: SIL-separated groups joined by `_`.
pub fn words_from_ids(ids: &[u32], vocab: &Vocabulary) -> Vec<String> {
    split_on_sil(ids, vocab)
        .iter()
        .map(|g| g.iter().map(|id| id.to_string()).collect::<Vec<_>>().join("_"))
        .collect()
}

/// Word tokens of a plain transcription.
pub fn words_from_text(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// Corpus word error rate.
pub fn wer<S: AsRef<[String]>>(refs: &[S], hyps: &[S]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::param("reference and hypothesis counts differ"));
    }
    let al: Vec<_> = refs.iter().zip(hyps).map(|(r, h)| align(r.as_ref(), h.as_ref())).collect();
    Ok(error_rate(&al)?.per)
}

/// Counts over non-blank classes; `counts[r - 1][h - 1]` for reference `r`
/// and hypothesis `h`. Insertions and deletions are not recorded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(vocab_size: usize) -> Self {
        let k = vocab_size.saturating_sub(1);
        Self { counts: vec![vec![0; k]; k] }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, r: u32, h: u32) -> u64 {
        self.counts[r as usize - 1][h as usize - 1]
    }

    pub fn row_sum(&self, id: u32) -> u64 {
        self.counts[id as usize - 1].iter().sum()
    }

    pub fn col_sum(&self, id: u32) -> u64 {
        self.counts.iter().map(|row| row[id as usize - 1]).sum()
    }

    pub fn add(&mut self, al: &Alignment<u32>) -> Result<()> {
        let k = self.classes() as u32;
        for op in &al.ops {
            let (r, h) = match *op {
                EditOp::Match(r, h) | EditOp::Sub(r, h) => (r, h),
                _ => continue,
            };
            if r == 0 || h == 0 || r > k || h > k {
                return Err(Error::data(format!("class pair ({r}, {h}) outside 1..={k}")));
            }
            self.counts[r as usize - 1][h as usize - 1] += 1;
        }
        Ok(())
    }

    /// CSV with a header row and a leading column of symbols.
    pub fn write_csv<W: Write>(&self, vocab: &Vocabulary, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["ref\\hyp".to_string()];
        header.extend(vocab.symbols().iter().cloned());
        out.write_record(&header)?;
        for (i, row) in self.counts.iter().enumerate() {
            let mut rec = vec![vocab.symbols()[i].clone()];
            rec.extend(row.iter().map(u64::to_string));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let header: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_owned).collect();
        let cols = header
            .iter()
            .map(|s| vocab.id(s).ok_or_else(|| Error::data(format!("unknown symbol {s} in confusion header"))))
            .collect::<Result<Vec<u32>>>()?;
        let mut m = Self::new(vocab.size());
        for rec in rdr.records() {
            let rec = rec?;
            let sym = rec.get(0).unwrap_or("");
            let r = vocab.id(sym).ok_or_else(|| Error::data(format!("unknown symbol {sym} in confusion rows")))?;
            for (c, field) in cols.iter().zip(rec.iter().skip(1)) {
                let v: u64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::data(format!("bad count {field:?} in confusion CSV")))?;
                m.counts[r as usize - 1][*c as usize - 1] = v;
            }
        }
        Ok(m)
    }
}

pub fn confusion(alignments: &[Alignment<u32>], vocab_size: usize) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new(vocab_size);
    for al in alignments {
        m.add(al)?;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassPr {
    pub id: u32,
    pub precision: f64,
    pub recall: f64,
    /// False when the class never appears as a hypothesis (precision set to 0).
    pub precision_defined: bool,
    /// False when the class never appears in the reference (recall set to 0).
    pub recall_defined: bool,
    pub support: u64,
}

pub fn precision_recall(m: &ConfusionMatrix) -> Vec<ClassPr> {
    (1..=m.classes() as u32)
        .map(|id| {
            let diag = m.get(id, id) as f64;
            let (row, col) = (m.row_sum(id), m.col_sum(id));
            ClassPr {
                id,
                precision: if col > 0 { diag / col as f64 } else { 0.0 },
                recall: if row > 0 { diag / row as f64 } else { 0.0 },
                precision_defined: col > 0,
                recall_defined: row > 0,
                support: row,
            }
        })
        .collect()
}

pub fn write_pr_csv<W: Write>(pr: &[ClassPr], vocab: &Vocabulary, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["symbol", "precision", "recall", "support", "precision_defined", "recall_defined"])?;
    for c in pr {
        out.write_record([
            vocab.symbol(c.id).unwrap_or("?").to_string(),
            c.precision.to_string(),
            c.recall.to_string(),
            c.support.to_string(),
            c.precision_defined.to_string(),
            c.recall_defined.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Chance that every phoneme of a word of `mean_len` phonemes is correct,
/// assuming independent errors.
pub fn expected_word_accuracy(per: f64, mean_len: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&per) {
        return Err(Error::param("per must lie in [0, 1]"));
    }
    Ok((1.0 - per).powf(mean_len))
}
