//! CTC phoneme vocabulary.
//!
//! Class id 0 is always the CTC blank; the symbols listed in a vocabulary
//! file take ids `1..=N` in file order.

use std::collections::HashMap;
use std::path::Path;

use crate::{Error, Result};

pub const BLANK_ID: u32 = 0;

/// Label of the word-boundary token.
pub const SIL: &str = "SIL";

const DEFAULT_VOCAB: &str = include_str!("../data/vocab.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// The shipped 39-phoneme CMU inventory plus `SIL`.
    pub fn default_phonemes() -> Self {
        Self::parse(DEFAULT_VOCAB).expect("shipped vocabulary is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read vocab {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parse vocabulary text: one symbol per line, `#` starts a comment,
    /// blank lines ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let symbols = text
            .lines()
            .map(|line| line.split('#').next().unwrap_or("").trim())
            .filter(|s| !s.is_empty())
            .map(str::to_owned);
        Self::from_symbols(symbols)
    }

    pub fn from_symbols<I, S>(symbols: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out = Vec::new();
        let mut index = HashMap::new();
        for sym in symbols {
            let sym: String = sym.into();
            if sym.is_empty()
                || !sym
                    .bytes()
                    .all(|b| b.is_ascii_uppercase() || b.is_ascii_digit() || b == b'_')
            {
                return Err(Error::data(format!(
                    "invalid symbol {sym:?}: expected non-empty uppercase ASCII"
                )));
            }
            let id = out.len() as u32 + 1;
            if index.insert(sym.clone(), id).is_some() {
                return Err(Error::data(format!("duplicate symbol {sym}")));
            }
            out.push(sym);
        }
        if out.is_empty() {
            return Err(Error::data("vocabulary is empty"));
        }
        if out.len() >= 0xFFFE {
            return Err(Error::data("vocabulary too large"));
        }
        Ok(Self {
            symbols: out,
            index,
        })
    }

    /// Number of CTC classes, blank included.
    pub fn size(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn blank_id(&self) -> u32 {
        BLANK_ID
    }

    /// Non-blank symbols in id order (`symbols()[i]` has id `i + 1`).
    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        if id == BLANK_ID {
            return None;
        }
        self.symbols.get(id as usize - 1).map(String::as_str)
    }

    pub fn sil_id(&self) -> Option<u32> {
        self.id(SIL)
    }

    pub fn encode<S: AsRef<str>>(&self, labels: &[S]) -> Result<Vec<u32>> {
        labels
            .iter()
            .map(|l| {
                let l = l.as_ref();
                self.id(l)
                    .ok_or_else(|| Error::data(format!("unknown symbol {l}")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<&str>> {
        ids.iter()
            .map(|&id| {
                self.symbol(id)
                    .ok_or_else(|| Error::data(format!("id {id} is not a phoneme of this vocabulary")))
            })
            .collect()
    }

    /// Parse a whitespace-separated line of symbols.
    pub fn encode_line(&self, line: &str) -> Result<Vec<u32>> {
        let labels: Vec<&str> = line.split_whitespace().collect();
        self.encode(&labels)
    }
}

/// Split an id sequence into word-like groups at `SIL` tokens.
///
/// SIL tokens are dropped and empty groups elided. Without a `SIL` symbol
/// in the vocabulary the whole sequence is one group.
pub fn split_on_sil(ids: &[u32], vocab: &Vocabulary) -> Vec<Vec<u32>> {
    let sil = vocab.sil_id();
    ids.split(|&id| Some(id) == sil)
        .filter(|g| !g.is_empty())
        .map(<[u32]>::to_vec)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_file_ordering() {
        let v = Vocabulary::parse("AH\nT\nSIL\n").unwrap();
        assert_eq!(v.size(), 4);
        assert_eq!(v.id("AH"), Some(1));
        assert_eq!(v.id("SIL"), Some(3));
        assert_eq!(v.blank_id(), 0);
        assert_eq!(v.symbol(0), None);
    }

    #[test]
    fn shipped_default_has_forty_symbols() {
        let v = Vocabulary::default_phonemes();
        assert_eq!(v.size(), 41);
        assert_eq!(v.sil_id(), Some(40));
        assert_eq!(v.id("AA"), Some(1));
    }

    #[test]
    fn duplicates_and_empty_rejected() {
        assert!(matches!(Vocabulary::parse("AH\nAH\n"), Err(Error::Data(_))));
        assert!(matches!(Vocabulary::parse("# nothing\n\n"), Err(Error::Data(_))));
        assert!(matches!(Vocabulary::parse("ah\n"), Err(Error::Data(_))));
    }

    #[test]
    fn comments_are_stripped() {
        let v = Vocabulary::parse("# header\nAA # open\n\nB\n").unwrap();
        assert_eq!(v.symbols(), &["AA".to_string(), "B".to_string()]);
    }

    #[test]
    fn encode_examples() {
        let v = Vocabulary::default_phonemes();
        let ids = v.encode(&["W", "AH", "T"]).unwrap();
        assert_eq!(ids.len(), 3);
        assert!(ids.iter().all(|&i| i >= 1));
        assert!(v.encode::<&str>(&[]).unwrap().is_empty());
        let err = v.encode(&["QQ"]).unwrap_err();
        assert!(err.to_string().contains("unknown symbol QQ"));
    }

    #[test]
    fn split_examples() {
        let v = Vocabulary::default_phonemes();
        let ids = v.encode_line("W AH T SIL D UW").unwrap();
        let groups = split_on_sil(&ids, &v);
        assert_eq!(
            groups,
            vec![v.encode_line("W AH T").unwrap(), v.encode_line("D UW").unwrap()]
        );
        let sil = v.sil_id().unwrap();
        assert!(split_on_sil(&[sil, sil], &v).is_empty());
        assert_eq!(split_on_sil(&[5], &v), vec![vec![5]]);
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(ids in proptest::collection::vec(1u32..41, 0..30)) {
            let v = Vocabulary::default_phonemes();
            let syms = v.decode(&ids).unwrap();
            prop_assert_eq!(v.encode(&syms).unwrap(), ids);
        }

        #[test]
        fn split_groups_never_contain_sil(ids in proptest::collection::vec(1u32..41, 0..40)) {
            let v = Vocabulary::default_phonemes();
            let sil = v.sil_id().unwrap();
            for g in split_on_sil(&ids, &v) {
                prop_assert!(!g.is_empty());
                prop_assert!(!g.contains(&sil));
            }
        }
    }
}
