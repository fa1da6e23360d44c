use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const BLANK: usize = 3;
/// Number of reserved ids; ordinary symbols start here.
pub const RESERVED: usize = 4;

const RESERVED_SYMBOLS: [&str; RESERVED] = ["<bos>", "<eos>", "<pad>", "<blank>"];

/// Symbol table whose first four ids are BOS, EOS, PAD and BLANK.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    symbols: Vec<String>,
}

impl Vocab {
    /// Reserved ids followed by `symbols`, which must be unique.
    pub fn new<S: Into<String>>(symbols: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED_SYMBOLS.iter().map(|s| s.to_string()).collect();
        for s in symbols {
            let s = s.into();
            if all.contains(&s) {
                return Err(Error::Validation(format!("duplicate vocabulary symbol `{s}`")));
            }
            all.push(s);
        }
        Ok(Self { symbols: all })
    }

    /// `prefix0 … prefix{n-1}`.
    pub fn numbered(prefix: &str, n: usize) -> Self {
        Self::new((0..n).map(|i| format!("{prefix}{i}"))).expect("numbered symbols are unique")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Ordinary (non-reserved) symbol count.
    pub fn n_symbols(&self) -> usize {
        self.symbols.len() - RESERVED
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Space-separated symbols of `ids`, skipping reserved ids.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= RESERVED)
            .filter_map(|&i| self.symbol(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Ids into a vocabulary of `vocab_size` symbols.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub vocab_size: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab: &Vocab) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab.len()) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: vocab.len(),
            });
        }
        Ok(Self {
            ids,
            vocab_size: vocab.len(),
        })
    }

    /// `BOS body EOS`.
    pub fn target(body: &[usize], vocab: &Vocab) -> Result<Self> {
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(body);
        ids.push(EOS);
        Self::new(ids, vocab)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Fails unless the sequence is `BOS … EOS`.
    pub fn check_target(&self) -> Result<()> {
        if self.ids.len() < 2 || self.ids[0] != BOS || self.ids[self.ids.len() - 1] != EOS {
            return Err(Error::MissingBoundaryTokens);
        }
        Ok(())
    }

    /// The ids between BOS and EOS of a target, or all ids otherwise.
    pub fn body(&self) -> &[usize] {
        match self.check_target() {
            Ok(()) => &self.ids[1..self.ids.len() - 1],
            Err(_) => &self.ids,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocab::numbered("w", 3);
        assert_eq!(v.len(), 7);
        assert_eq!(v.symbol(BOS), Some("<bos>"));
        assert_eq!(v.symbol(BLANK), Some("<blank>"));
        assert_eq!(v.id("w0"), Some(RESERVED));
    }

    #[test]
    fn duplicate_symbols_are_rejected() {
        assert!(Vocab::new(["a", "a"]).is_err());
        assert!(Vocab::new(["<pad>"]).is_err());
    }

    #[test]
    fn targets_need_boundaries() {
        let v = Vocab::numbered("w", 3);
        let t = TokenSequence::target(&[4, 5], &v).unwrap();
        assert!(t.check_target().is_ok());
        assert_eq!(t.body(), &[4, 5]);
        let bare = TokenSequence::new(vec![4, 5], &v).unwrap();
        assert!(matches!(bare.check_target(), Err(Error::MissingBoundaryTokens)));
        assert!(TokenSequence::new(vec![9], &v).is_err());
    }
}
