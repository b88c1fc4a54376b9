//! Fixed word-level vocabulary. The synthetic datasets emit a closed set
//! of words; the table maps them to ids and round-trips through a JSON
//! file saved beside checkpoints.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, thiserror::Error)]
pub enum VocabError {
    #[error("unknown word `{0}`")]
    UnknownWord(String),
    #[error("unknown token id {0}")]
    UnknownId(usize),
    #[error("vocabulary io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

impl Vocab {
    /// Build from the word list; specials are prepended in fixed order.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Vocab {
        let mut all: Vec<String> = vec![PAD.into(), BOS.into(), EOS.into()];
        for w in words {
            if !all.contains(&w) {
                all.push(w);
            }
        }
        let index = all
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words: all, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn bos(&self) -> usize {
        1
    }

    pub fn eos(&self) -> usize {
        2
    }

    pub fn id(&self, word: &str) -> Result<usize, VocabError> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| VocabError::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Result<&str, VocabError> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or(VocabError::UnknownId(id))
    }

    pub fn encode(&self, text: &[&str]) -> Result<Vec<usize>, VocabError> {
        text.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>, VocabError> {
        ids.iter()
            .map(|&i| self.word(i).map(str::to_string))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let json = serde_json::to_string_pretty(&self.words)
            .map_err(|e| VocabError::Io(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| VocabError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Vocab, VocabError> {
        let json = std::fs::read_to_string(path).map_err(|e| VocabError::Io(e.to_string()))?;
        let words: Vec<String> =
            serde_json::from_str(&json).map_err(|e| VocabError::Io(e.to_string()))?;
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Vocab { words, index })
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first_and_roundtrip() {
        let v = Vocab::from_words(["red".to_string(), "blue".to_string(), "red".to_string()]);
        assert_eq!(v.len(), 5); // 3 specials + 2 unique words
        assert_eq!(v.id(PAD).unwrap(), 0);
        assert_eq!(v.id(BOS).unwrap(), 1);
        assert_eq!(v.id(EOS).unwrap(), 2);
        let ids = v.encode(&["red", "blue"]).unwrap();
        assert_eq!(v.decode(&ids).unwrap(), vec!["red", "blue"]);
        assert!(v.id("green").is_err());
    }

    #[test]
    fn file_roundtrip() {
        let v = Vocab::from_words(["a".to_string(), "b".to_string()]);
        let dir = std::env::temp_dir().join("viscop_vocab_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.json");
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(loaded.id("b").unwrap(), v.id("b").unwrap());
    }
}
