//! Word-level tokenizer and closed vocabulary.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const IMAGE1: usize = 3;
pub const IMAGE2: usize = 4;

pub const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<image1>", "<image2>"];
pub const MAX_VOCAB: usize = 512;

const HEADER: &str = "CCVOCAB 1";
const STRIPPED: [char; 6] = ['.', ',', ';', ':', '!', '?'];

/// Lowercase, drop `. , ; : ! ?`, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !STRIPPED.contains(c))
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials first, then every distinct word of `texts` in first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s.to_string())?;
        }
        for text in texts {
            for w in tokenize(text) {
                if !v.index.contains_key(&w) {
                    v.push(w)?;
                }
            }
        }
        Ok(v)
    }

    fn push(&mut self, token: String) -> Result<()> {
        if self.tokens.len() >= MAX_VOCAB {
            return Err(Error::invalid("vocabulary", format!("more than {MAX_VOCAB} tokens")));
        }
        if self.index.insert(token.clone(), self.tokens.len()).is_some() {
            return Err(Error::invalid("vocabulary", format!("duplicate token '{token}'")));
        }
        self.tokens.push(token);
        Ok(())
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

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Training-time encoding: unknown words are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        tokenize(text)
            .into_iter()
            .map(|w| self.id(&w).ok_or(Error::OutOfVocabulary(w)))
            .collect()
    }

    /// Inference-time encoding: unknown words map to `<pad>`.
    pub fn encode_lossy(&self, text: &str) -> Vec<usize> {
        tokenize(text).into_iter().map(|w| self.id(&w).unwrap_or(PAD)).collect()
    }

    /// Joins word tokens with spaces, skipping `<pad>`/`<bos>` and stopping at `<eos>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(HEADER);
        s.push('\n');
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: 1,
                msg: format!("expected header '{HEADER}'"),
            });
        }
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, line) in lines.enumerate() {
            v.push(line.to_string()).map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: i + 2,
                msg: e.to_string(),
            })?;
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if v.token(i) != Some(s) {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: i + 2,
                    msg: format!("expected special token {s}"),
                });
            }
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_text(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalization() {
        assert_eq!(tokenize("A road is built."), vec!["a", "road", "is", "built"]);
        assert_eq!(tokenize("  Hi,  there!?  "), vec!["hi", "there"]);
        assert_eq!(tokenize("This is Image1 <image1>."), vec!["this", "is", "image1", "<image1>"]);
    }

    #[test]
    fn specials_are_fixed() {
        let v = Vocabulary::build(["a road"]).unwrap();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<image2>"), Some(IMAGE2));
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn oov_handling() {
        let v = Vocabulary::build(["a road"]).unwrap();
        assert!(matches!(v.encode("a river"), Err(Error::OutOfVocabulary(w)) if w == "river"));
        assert_eq!(v.encode_lossy("a river"), vec![5, PAD]);
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = Vocabulary::build(["a road is built"]).unwrap();
        let mut ids = vec![BOS];
        ids.extend(v.encode("a road").unwrap());
        ids.push(EOS);
        ids.extend(v.encode("built").unwrap());
        assert_eq!(v.decode(&ids), "a road");
    }

    #[test]
    fn text_roundtrip_and_header() {
        let v = Vocabulary::build(["there is no change"]).unwrap();
        let back = Vocabulary::from_text(&v.to_text(), "mem").unwrap();
        assert_eq!(v, back);
        assert!(Vocabulary::from_text("VOCAB\n<pad>\n", "mem").is_err());
        assert!(Vocabulary::from_text("CCVOCAB 1\na\n", "mem").is_err());
    }

    proptest! {
        #[test]
        fn detokenize_tokenize_idempotent(words in prop::collection::vec("[A-Za-z]{1,6}[.,!?]?", 1..8)) {
            let text = words.join(" ");
            let v = Vocabulary::build([text.as_str()]).unwrap();
            let once = v.decode(&v.encode(&text).unwrap());
            prop_assert_eq!(&once, &normalize(&text));
            prop_assert_eq!(v.decode(&v.encode(&once).unwrap()), once);
        }
    }
}
