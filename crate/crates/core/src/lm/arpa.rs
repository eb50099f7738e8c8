//! ARPA text format: `\data\` header with per-order counts, one
//! `\k-grams:` section per order (`log10 p <TAB> tokens [<TAB> log10 bow]`),
//! closed by `\end\`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{pack, NGramModel, BOS, EOS, MAX_ORDER};
use crate::vocab::Vocabulary;
use crate::{Error, Result};

const BOS_SYMBOL: &str = "<s>";
const EOS_SYMBOL: &str = "</s>";
/// Log10 probability written for n-grams that only carry a backoff weight.
const NO_PROB: f64 = -99.0;

fn symbol_of(token: u32, vocab: &Vocabulary) -> Result<&str> {
    match token {
        BOS => Ok(BOS_SYMBOL),
        EOS => Ok(EOS_SYMBOL),
        t => vocab
            .symbol(t)
            .ok_or_else(|| Error::data(format!("token {t} missing from vocabulary"))),
    }
}

fn token_of(symbol: &str, vocab: &Vocabulary, line: usize) -> Result<u32> {
    match symbol {
        BOS_SYMBOL => Ok(BOS),
        EOS_SYMBOL => Ok(EOS),
        s => vocab
            .id(s)
            .ok_or_else(|| Error::data(format!("line {line}: unknown symbol {s}"))),
    }
}

/// Render a model as ARPA text. Values are written at full `f64` precision.
pub fn format_arpa(model: &NGramModel, vocab: &Vocabulary) -> Result<String> {
    if model.vocab_size() != vocab.size() {
        return Err(Error::param(format!(
            "model has {} outcomes, vocabulary has {} classes",
            model.vocab_size(),
            vocab.size()
        )));
    }
    let ln10 = std::f64::consts::LN_10;
    let sections: Vec<Vec<Vec<u32>>> = (1..=model.order()).map(|k| model.ngrams_of_order(k)).collect();
    let mut out = String::from("\n\\data\\\n");
    for (k, grams) in sections.iter().enumerate() {
        writeln!(out, "ngram {}={}", k + 1, grams.len()).unwrap();
    }
    for (k, grams) in sections.iter().enumerate() {
        writeln!(out, "\n\\{}-grams:", k + 1).unwrap();
        for gram in grams {
            let p = model.stored_prob(gram).map_or(NO_PROB, |lp| (lp / ln10).max(NO_PROB));
            let symbols = gram
                .iter()
                .map(|&t| symbol_of(t, vocab))
                .collect::<Result<Vec<_>>>()?
                .join(" ");
            write!(out, "{p}\t{symbols}").unwrap();
            if let Some(b) = model.stored_backoff(gram) {
                write!(out, "\t{}", b / ln10).unwrap();
            }
            out.push('\n');
        }
    }
    out.push_str("\n\\end\\\n");
    Ok(out)
}

pub fn write_arpa(model: &NGramModel, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_arpa(model, vocab)?)?;
    Ok(())
}

pub fn read_arpa(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<NGramModel> {
    let text = std::fs::read_to_string(path)?;
    parse_arpa(&text, vocab)
}

/// Parse ARPA text. Entries whose probability is `<= -99` are treated as
/// backoff-only (the conventional `<s>` line).
pub fn parse_arpa(text: &str, vocab: &Vocabulary) -> Result<NGramModel> {
    #[derive(PartialEq)]
    enum State {
        Preamble,
        Data,
        Section(usize),
        Done,
    }
    let mut state = State::Preamble;
    let mut declared: Vec<usize> = Vec::new();
    let mut seen: Vec<usize> = Vec::new();
    let mut probs: Vec<HashMap<u128, f64>> = Vec::new();
    let mut backoffs: Vec<HashMap<u128, f64>> = Vec::new();
    let ln10 = std::f64::consts::LN_10;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line == "\\data\\" {
            if state != State::Preamble {
                return Err(Error::data(format!("line {line_no}: unexpected \\data\\")));
            }
            state = State::Data;
            continue;
        }
        if line == "\\end\\" {
            state = State::Done;
            break;
        }
        if line.starts_with('\\') {
            let k: usize = line
                .strip_prefix('\\')
                .and_then(|s| s.strip_suffix("-grams:"))
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::data(format!("line {line_no}: malformed section header {line:?}")))?;
            if state == State::Preamble || k == 0 || k > declared.len() {
                return Err(Error::data(format!("line {line_no}: unexpected section {line:?}")));
            }
            if probs.is_empty() {
                let order = declared.len();
                probs = vec![HashMap::new(); order];
                backoffs = vec![HashMap::new(); order - 1];
                seen = vec![0; order];
            }
            state = State::Section(k);
            continue;
        }
        match state {
            State::Preamble => continue,
            State::Data => {
                let rest = line
                    .strip_prefix("ngram ")
                    .ok_or_else(|| Error::data(format!("line {line_no}: expected 'ngram k=count'")))?;
                let (k, n) = rest
                    .split_once('=')
                    .and_then(|(k, n)| Some((k.trim().parse::<usize>().ok()?, n.trim().parse::<usize>().ok()?)))
                    .ok_or_else(|| Error::data(format!("line {line_no}: malformed count line {line:?}")))?;
                if k != declared.len() + 1 || k > MAX_ORDER {
                    return Err(Error::data(format!("line {line_no}: unexpected order {k}")));
                }
                declared.push(n);
            }
            State::Section(k) => {
                let fields: Vec<&str> = line.split('\t').collect();
                let fields: Vec<&str> = if fields.len() >= 2 {
                    fields
                } else {
                    line.split_whitespace().collect()
                };
                let parse_num = |s: &str| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::data(format!("line {line_no}: bad number {s:?}")))
                };
                let (prob, tokens, bow) = if fields.len() >= 2 && fields[1].split_whitespace().count() == k {
                    let bow = fields.get(2).map(|s| parse_num(s)).transpose()?;
                    (parse_num(fields[0])?, fields[1].split_whitespace().collect::<Vec<_>>(), bow)
                } else {
                    // Whitespace-separated layout: prob, k tokens, optional bow.
                    let parts: Vec<&str> = line.split_whitespace().collect();
                    if parts.len() != k + 1 && parts.len() != k + 2 {
                        return Err(Error::data(format!("line {line_no}: expected {k} tokens")));
                    }
                    let bow = parts.get(k + 1).map(|s| parse_num(s)).transpose()?;
                    (parse_num(parts[0])?, parts[1..=k].to_vec(), bow)
                };
                let gram = tokens
                    .iter()
                    .map(|s| token_of(s, vocab, line_no))
                    .collect::<Result<Vec<u32>>>()?;
                let key = pack(&gram);
                if prob > NO_PROB {
                    probs[k - 1].insert(key, prob * ln10);
                }
                if let Some(b) = bow {
                    if k == declared.len() {
                        return Err(Error::data(format!("line {line_no}: backoff on highest order")));
                    }
                    backoffs[k - 1].insert(key, b * ln10);
                }
                seen[k - 1] += 1;
            }
            State::Done => unreachable!(),
        }
    }
    if state != State::Done {
        return Err(Error::data("missing \\end\\ marker"));
    }
    if declared.is_empty() {
        return Err(Error::data("no \\data\\ counts"));
    }
    if probs.is_empty() {
        probs = vec![HashMap::new(); declared.len()];
        backoffs = vec![HashMap::new(); declared.len() - 1];
        seen = vec![0; declared.len()];
    }
    for (k, (&d, &s)) in declared.iter().zip(&seen).enumerate() {
        if d != s {
            return Err(Error::data(format!("{}-grams: header declares {d}, found {s}", k + 1)));
        }
    }
    let vocab_size = vocab.size();
    let floor = if probs[0].is_empty() {
        -(vocab_size as f64).ln()
    } else {
        f64::NEG_INFINITY
    };
    Ok(NGramModel::from_tables(declared.len(), vocab_size, probs, backoffs, floor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{count_ngrams, train_kneser_ney, CountConfig, KnConfig};

    fn vocab() -> Vocabulary {
        Vocabulary::parse("A\nB\nC\n").unwrap()
    }

    fn model() -> NGramModel {
        let corpus = vec![vec![1, 2, 3], vec![1, 2], vec![3, 3, 1], vec![2]];
        let stats = count_ngrams(&corpus, CountConfig::new(3, 4)).unwrap();
        train_kneser_ney(&stats, KnConfig::default()).unwrap()
    }

    #[test]
    fn header_counts_match_tables() {
        let m = model();
        let text = format_arpa(&m, &vocab()).unwrap();
        for (k, n) in m.entry_counts().iter().enumerate() {
            assert!(text.contains(&format!("ngram {}={}\n", k + 1, n)));
        }
        assert!(text.contains("\t<s>\t"));
        assert!(text.trim_end().ends_with("\\end\\"));
    }

    #[test]
    fn roundtrip_preserves_queries() {
        let m = model();
        let v = vocab();
        let back = parse_arpa(&format_arpa(&m, &v).unwrap(), &v).unwrap();
        for ctx in [vec![], vec![BOS], vec![BOS, 1], vec![1, 2], vec![3, 3], vec![2, 2]] {
            for w in m.outcomes() {
                assert!((m.logprob(w, &ctx) - back.logprob(w, &ctx)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn malformed_header_reports_line() {
        let v = vocab();
        let err = parse_arpa("\\data\\\nngram 1=1\n\n\\1-gramz:\n-1\tA\n\\end\\\n", &v).unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
        let err = parse_arpa("\\data\\\nngram 1=2\n\\1-grams:\n-1\tA\n\\end\\\n", &v).unwrap_err();
        assert!(err.to_string().contains("declares 2"));
        assert!(parse_arpa("\\data\\\nngram 1=1\n\\1-grams:\n-1\tQ\n\\end\\\n", &v).is_err());
    }

    #[test]
    fn accepts_whitespace_separated_entries() {
        let v = vocab();
        let text = "\\data\\\nngram 1=2\nngram 2=1\n\\1-grams:\n-0.3 A -0.1\n-0.5 B\n\\2-grams:\n-0.2 A B\n\\end\\\n";
        let m = parse_arpa(text, &v).unwrap();
        assert!((m.logprob(2, &[1]) - (-0.2 * std::f64::consts::LN_10)).abs() < 1e-12);
    }

    #[test]
    fn empty_model_roundtrip_is_uniform() {
        let v = vocab();
        let m = NGramModel::uniform(2, 4);
        let back = parse_arpa(&format_arpa(&m, &v).unwrap(), &v).unwrap();
        assert!((back.logprob(1, &[2]) - 0.25f64.ln()).abs() < 1e-15);
    }
}
