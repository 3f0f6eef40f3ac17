use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const START: &str = "[START]";
pub const EOS: &str = "</s>";

pub const PROMPT_WORDS: [&str; 5] = ["classify:", "infer:", "reverse:", "premise:", "hypothesis:"];
pub const LABEL_WORDS: [&str; 5] = ["positive", "negative", "entailment", "contradiction", "neutral"];
pub const MARKER_WORDS: [&str; 2] = ["pos", "neg"];
pub const FILLER_WORDS: [&str; 20] = [
    "the", "a", "movie", "plot", "was", "is", "very", "quite", "film", "story", "acting", "really", "so", "and", "but",
    "it", "this", "show", "scene", "cast",
];
pub const ITEM_WORDS: [&str; 50] = [
    "apple", "banana", "cherry", "grape", "lemon", "mango", "peach", "pear", "plum", "melon", "red", "blue", "green",
    "yellow", "black", "white", "purple", "pink", "brown", "gray", "cat", "dog", "fox", "owl", "bee", "cow", "pig",
    "hen", "ant", "elk", "sun", "moon", "star", "rain", "snow", "wind", "fire", "rock", "tree", "lake", "road", "door",
    "book", "lamp", "ship", "coin", "bell", "drum", "kite", "ring",
];
pub const DIGIT_WORDS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
pub const LETTER_WORDS: [&str; 25] = [
    "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o", "p", "q", "r", "s", "t", "u", "v", "w", "x",
    "y", "z",
];

/// Closed word-level vocabulary. Ids 0, 1 and 2 are reserved for padding,
/// `[START]` and end-of-sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        let words = [PAD, START, EOS]
            .into_iter()
            .chain(PROMPT_WORDS)
            .chain(LABEL_WORDS)
            .chain(MARKER_WORDS)
            .chain(FILLER_WORDS)
            .chain(ITEM_WORDS)
            .chain(DIGIT_WORDS)
            .chain(LETTER_WORDS)
            .map(str::to_string)
            .collect();
        Tokenizer::from_words(words).expect("built-in vocabulary has no duplicates")
    }
}

impl Tokenizer {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if ids.insert(w.clone(), i).is_some() {
                return Err(Error::Config(vec![format!("duplicate vocabulary word {w:?}")]));
            }
        }
        Ok(Tokenizer { words, ids })
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn start_id(&self) -> usize {
        1
    }

    pub fn eos_id(&self) -> usize {
        2
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.ids
            .get(word)
            .copied()
            .ok_or_else(|| Error::Tokenization(word.to_string()))
    }

    /// Whitespace-split encoding.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Joins words with single spaces; unknown ids render as `<unk:ID>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.words.get(i).cloned().unwrap_or_else(|| format!("<unk:{i}>")))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Decodes up to (not including) the first end-of-sequence id, dropping
    /// padding and `[START]`.
    pub fn decode_output(&self, ids: &[usize]) -> String {
        let body: Vec<usize> = ids
            .iter()
            .copied()
            .take_while(|&i| i != self.eos_id())
            .filter(|&i| i != self.pad_id() && i != self.start_id())
            .collect();
        self.decode(&body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_layout() {
        let t = Tokenizer::default();
        assert_eq!(t.vocab_size(), 120);
        assert_eq!(t.id(PAD).unwrap(), t.pad_id());
        assert_eq!(t.id(START).unwrap(), t.start_id());
        assert_eq!(t.id(EOS).unwrap(), t.eos_id());
    }

    #[test]
    fn round_trip_and_oov() {
        let t = Tokenizer::default();
        let s = "classify: pos the neg pos";
        assert_eq!(t.decode(&t.encode(s).unwrap()), s);
        match t.encode("pos zebra") {
            Err(Error::Tokenization(w)) => assert_eq!(w, "zebra"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn output_decoding_stops_at_eos() {
        let t = Tokenizer::default();
        let ids = [t.id("b").unwrap(), t.id("c").unwrap(), t.eos_id(), t.id("d").unwrap()];
        assert_eq!(t.decode_output(&ids), "b c");
    }
}
