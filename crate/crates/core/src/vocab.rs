//! Closed word-level vocabulary of the instruction language.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::world::attrs::{Color, Direction, Shape, Texture, ANGLES};
use crate::world::template::{normalize, template_words};
use crate::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const NEWLINE: &str = "<nl>";
pub const TRUE: &str = "true";
pub const FALSE: &str = "false";

/// Words of the fixed context phrases.
pub const CONTEXT_WORDS: [&str; 7] = ["task", ":", "infer", "instruction", "given", "trajectory", "success"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::BadConfig(format!("duplicate vocabulary word `{w}`")));
            }
        }
        for special in [PAD, BOS, EOS, NEWLINE, TRUE, FALSE] {
            if !index.contains_key(special) {
                return Err(Error::BadConfig(format!("vocabulary lacks `{special}`")));
            }
        }
        Ok(Self { words, index })
    }

    /// The vocabulary shared by every model in the crate.
    pub fn standard() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let mut words: Vec<String> =
                [PAD, BOS, EOS, NEWLINE, TRUE, FALSE].iter().map(|s| s.to_string()).collect();
            let mut push = |w: &str| {
                if !words.iter().any(|x| x == w) {
                    words.push(w.to_string());
                }
            };
            CONTEXT_WORDS.iter().for_each(|w| push(w));
            template_words().iter().for_each(|w| push(w));
            Color::ALL.iter().for_each(|c| push(c.word()));
            Texture::ALL.iter().for_each(|t| push(t.word()));
            Shape::ALL.iter().for_each(|s| push(s.word()));
            Direction::ALL.iter().for_each(|d| push(d.word()));
            ANGLES.iter().for_each(|a| push(&a.to_string()));
            Vocab::from_words(words).expect("standard vocabulary is well formed")
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index.get(word).copied().ok_or_else(|| Error::OovToken(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words.get(id).map(String::as_str).ok_or(Error::BadId(id))
    }

    pub fn pad(&self) -> usize {
        self.index[PAD]
    }
    pub fn bos(&self) -> usize {
        self.index[BOS]
    }
    pub fn eos(&self) -> usize {
        self.index[EOS]
    }
    pub fn newline(&self) -> usize {
        self.index[NEWLINE]
    }
    pub fn true_id(&self) -> usize {
        self.index[TRUE]
    }
    pub fn false_id(&self) -> usize {
        self.index[FALSE]
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let norm = normalize(text);
        norm.split(' ').filter(|w| !w.is_empty()).map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&i| self.word(i)).collect();
        Ok(words?.join(" "))
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let v = Vocab::standard();
        let ids = v.tokenize("rotate blue flower by 60 degrees").unwrap();
        assert_eq!(v.detokenize(&ids).unwrap(), "rotate blue flower by 60 degrees");
        assert_eq!(v.tokenize("").unwrap(), Vec::<usize>::new());
        assert!(matches!(v.tokenize("rotate the spaceship"), Err(Error::OovToken(w)) if w == "spaceship"));
        assert!(matches!(v.word(10_000), Err(Error::BadId(10_000))));
    }

    #[test]
    fn specials_are_present_and_distinct() {
        let v = Vocab::standard();
        let ids = [v.pad(), v.bos(), v.eos(), v.newline(), v.true_id(), v.false_id()];
        let set: std::collections::BTreeSet<_> = ids.iter().collect();
        assert_eq!(set.len(), 6);
        assert!(Vocab::from_words(vec!["a".into(), "a".into()]).is_err());
    }
}
