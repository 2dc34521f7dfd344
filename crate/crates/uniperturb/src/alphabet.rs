//! Ordered character alphabet shared by corpora, models, and the CTC layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An ordered, duplicate-free set of characters. The CTC blank symbol is not
/// a member; it is the implicit extra class with index `len()`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Alphabet {
    chars: Vec<char>,
}

impl Alphabet {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let chars: Vec<char> = chars.into_iter().collect();
        if chars.is_empty() {
            return Err(Error::InvalidConfig("alphabet is empty".into()));
        }
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(Error::InvalidConfig(format!(
                    "alphabet has duplicate character {c:?}"
                )));
            }
        }
        Ok(Self { chars })
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::new(s.chars())
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    /// Index of the implicit blank class.
    pub fn blank(&self) -> usize {
        self.chars.len()
    }

    /// Number of CTC classes: alphabet plus blank.
    pub fn num_classes(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn contains(&self, c: char) -> bool {
        self.chars.contains(&c)
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c)
    }

    pub fn char_at(&self, index: usize) -> Option<char> {
        self.chars.get(index).copied()
    }

    /// Map a string to class indices; fails on the first foreign character.
    pub fn labels_of(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.index_of(c).ok_or(Error::InvalidTranscript(c)))
            .collect()
    }
}

impl TryFrom<String> for Alphabet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<Alphabet> for String {
    fn from(a: Alphabet) -> String {
        a.chars.into_iter().collect()
    }
}

impl std::fmt::Display for Alphabet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.chars {
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indices_follow_order() {
        let a = Alphabet::parse("abc").unwrap();
        assert_eq!(a.index_of('a'), Some(0));
        assert_eq!(a.index_of('c'), Some(2));
        assert_eq!(a.index_of('z'), None);
        assert_eq!(a.blank(), 3);
        assert_eq!(a.num_classes(), 4);
    }

    #[test]
    fn rejects_duplicates_and_empty() {
        assert!(Alphabet::parse("aba").is_err());
        assert!(Alphabet::parse("").is_err());
    }

    #[test]
    fn labels_round_trip() {
        let a = Alphabet::parse("abcdefghij").unwrap();
        assert_eq!(a.labels_of("cab").unwrap(), vec![2, 0, 1]);
        assert!(matches!(
            a.labels_of("a#b"),
            Err(Error::InvalidTranscript('#'))
        ));
    }
}
