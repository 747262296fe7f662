use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const UNK: u32 = 4;
/// Number of reserved ids preceding the content tokens.
pub const RESERVED: usize = 5;

const RESERVED_NAMES: [&str; RESERVED] = ["<pad>", "<s>", "</s>", "<sep>", "<unk>"];

/// Bijection between whitespace tokens and ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from content tokens, in order, after the reserved ids.
    pub fn new<I, S>(content: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        for tok in content {
            let tok = tok.into();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid vocabulary token {tok:?}")));
            }
            if index.insert(tok.clone(), tokens.len() as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {tok:?}")));
            }
            tokens.push(tok);
        }
        Ok(Vocabulary { tokens, index })
    }

    /// `n` content tokens named `t0 … t{n-1}`.
    pub fn synthetic(n: usize) -> Self {
        Vocabulary::new((0..n).map(|i| format!("t{i}"))).expect("distinct names")
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED
    }

    pub fn content_len(&self) -> usize {
        self.tokens.len() - RESERVED
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or(RESERVED_NAMES[UNK as usize], |s| s.as_str())
    }

    pub fn encode(&self, sentence: &str) -> Vec<u32> {
        sentence.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// One content token per line; line `i` holds id `i + RESERVED`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for t in &self.tokens[RESERVED..] {
            text.push_str(t);
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Vocabulary::new(text.lines().map(str::to_owned))
    }
}

pub fn is_special(id: u32) -> bool {
    (id as usize) < RESERVED
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_unknowns() {
        let v = Vocabulary::new(["a", "b"]).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.token(SEP), "<sep>");
        assert_eq!(v.decode(&v.encode(" a  b a ")), "a b a");
    }

    #[test]
    fn rejects_duplicates() {
        assert!(Vocabulary::new(["a", "a"]).is_err());
        assert!(Vocabulary::new(["<pad>"]).is_err());
    }
}
