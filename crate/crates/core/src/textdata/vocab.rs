use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::textdata::Sentence;

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MSK: usize = 4;

/// Reserved tokens, in id order.
pub const RESERVED: [&str; 5] = ["<pad>", "<sos>", "<eos>", "_unk", "<msk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Frequency-ranked vocabulary: tokens seen at least `min_freq` times,
    /// most frequent first with lexicographic tie-breaking, truncated so
    /// that the total size including reserved ids is at most `max_size`.
    pub fn build(corpus: &[Sentence], min_freq: usize, max_size: usize) -> Result<Self> {
        if min_freq == 0 || max_size <= RESERVED.len() {
            return Err(Error::InvalidArgument(format!(
                "vocab needs min_freq >= 1 and max_size > {} (got {min_freq}, {max_size})",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for tok in corpus.iter().flatten() {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED.len());
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_owned()))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `<sos>`, token ids (`_unk` for unknown tokens), `<eos>`.
    pub fn encode(&self, sentence: &[String]) -> Vec<usize> {
        std::iter::once(SOS)
            .chain(sentence.iter().map(|t| self.id(t).unwrap_or(UNK)))
            .chain(std::iter::once(EOS))
            .collect()
    }

    /// Inverse of [`Vocab::encode`]: drops framing tokens and stops at `<eos>`.
    pub fn decode(&self, ids: &[usize]) -> Sentence {
        ids.iter()
            .skip_while(|&&i| i == SOS)
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD)
            .map(|&i| self.token(i).to_owned())
            .collect()
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::InvalidArgument(
                "vocab file must start with the five reserved tokens".into(),
            ));
        }
        let v = Self::from_tokens(tokens);
        if v.index.len() != v.tokens.len() {
            return Err(Error::InvalidArgument("vocab file contains duplicate tokens".into()));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textdata::parse_corpus;

    fn words(v: &Vocab) -> Vec<&str> {
        v.tokens()[RESERVED.len()..].iter().map(String::as_str).collect()
    }

    #[test]
    fn min_freq_and_size_limits() {
        let c = parse_corpus("a a a b");
        assert_eq!(words(&Vocab::build(&c, 2, 100).unwrap()), vec!["a"]);
        let c = parse_corpus("a b c a");
        assert_eq!(words(&Vocab::build(&c, 1, 6).unwrap()), vec!["a"]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let c = parse_corpus("b a b a");
        assert_eq!(words(&Vocab::build(&c, 1, 7).unwrap()), vec!["a", "b"]);
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let c = parse_corpus("_unk <msk> x");
        let v = Vocab::build(&c, 1, 50).unwrap();
        assert_eq!(words(&v), vec!["x"]);
        assert_eq!(v.id("<msk>"), Some(MSK));
        assert_eq!(v.id("_unk"), Some(UNK));
        assert!(Vocab::build(&c, 0, 50).is_err());
        assert!(Vocab::build(&c, 1, 5).is_err());
    }

    #[test]
    fn encode_examples() {
        let v = Vocab::build(&parse_corpus("a"), 1, 10).unwrap();
        let a = v.id("a").unwrap();
        assert_eq!(v.encode(&["a".to_string()]), vec![1, a, 2]);
        assert_eq!(v.encode(&["zzz".to_string()]), vec![1, 3, 2]);
        assert_eq!(v.encode(&[]), vec![1, 2]);
    }

    #[test]
    fn file_roundtrip() {
        let v = Vocab::build(&parse_corpus("the cat sat on the mat"), 1, 100).unwrap();
        let text = v.to_text();
        assert!(text.starts_with("<pad>\n<sos>\n<eos>\n_unk\n<msk>\nthe\n"));
        assert_eq!(Vocab::from_text(&text).unwrap(), v);
        assert!(Vocab::from_text("a\nb\n").is_err());
    }
}
