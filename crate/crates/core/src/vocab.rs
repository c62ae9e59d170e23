//! Closed toy vocabulary and the instruction/answer templates built from it.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = u32;
pub type TokenSequence = Vec<TokenId>;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEG: TokenId = 3;
pub const MASK: TokenId = 4;

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 3] = ["rect", "disk", "cross"];

/// Foreground / background words used by the next-token baseline.
pub const FG_WORD: &str = "fg";
pub const BG_WORD: &str = "bg";

/// Placeholder replaced by `<color> <shape>` when a template is filled.
pub const CLASS_SLOT: &str = "{c}";

pub const QUESTION_TEMPLATES: [&str; 6] = [
    "please segment only the {c} in the image .",
    "can you segment the {c} in the image ?",
    "where is the {c} in this picture ? please respond with segmentation mask .",
    "where is {c} in this image ? please output segmentation mask .",
    "could you provide the segmentation mask for {c} in this image ?",
    "please segment the image and highlight {c} .",
];

pub const ANSWER_TEMPLATES: [&str; 7] = [
    "sure , here is the segmentation mask for {c} <seg> :",
    "here is the segmentation mask focusing on the {c} <seg> :",
    "here is the segmentation mask highlighting the {c} <seg> :",
    "the segmentation map for {c} <seg> is :",
    "the segmentation mask for {c} <seg> is shown below :",
    "sure , the segmented output for {c} <seg> is :",
    "certainly , the segmentation map for {c} <seg> is :",
];

pub const REFUSAL_TEMPLATE: &str = "sorry , there is no {c} in the image .";

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<seg>", "[mask]"];

/// Ordered token list with a reverse index. Ids are positions in the list.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::toy()
    }
}

impl Vocabulary {
    /// The fixed toy vocabulary: specials, colors, shapes, baseline words,
    /// then every template word in first-seen order.
    pub fn toy() -> Self {
        let mut tokens: Vec<String> = Vec::new();
        let push = |w: &str, tokens: &mut Vec<String>| {
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        };
        for w in SPECIALS.iter().chain(&COLORS).chain(&SHAPES) {
            push(w, &mut tokens);
        }
        push(FG_WORD, &mut tokens);
        push(BG_WORD, &mut tokens);
        let templates = QUESTION_TEMPLATES
            .iter()
            .chain(&ANSWER_TEMPLATES)
            .chain(std::iter::once(&REFUSAL_TEMPLATE));
        for t in templates {
            for w in t.split_whitespace().filter(|w| *w != CLASS_SLOT) {
                push(w, &mut tokens);
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Encoding(word.to_string()))
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn fg(&self) -> TokenId {
        self.index[FG_WORD]
    }

    pub fn bg(&self) -> TokenId {
        self.index[BG_WORD]
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<TokenSequence> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.word(id)
                    .map(str::to_string)
                    .ok_or_else(|| Error::Decoding(format!("token id {id} outside vocabulary")))
            })
            .collect()
    }

    /// Encodes a whitespace-separated sentence.
    pub fn encode_str(&self, text: &str) -> Result<TokenSequence> {
        let words: Vec<&str> = text.split_whitespace().collect();
        self.encode(&words)
    }

    pub fn decode_str(&self, ids: &[TokenId]) -> Result<String> {
        Ok(self.decode(ids)?.join(" "))
    }
}

/// Substitutes `<color> <shape>` into a template and returns its words.
pub fn fill_template(template: &str, color: &str, shape: &str) -> Vec<String> {
    let mut out = Vec::new();
    for w in template.split_whitespace() {
        if w == CLASS_SLOT {
            out.push(color.to_string());
            out.push(shape.to_string());
        } else {
            out.push(w.to_string());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocabulary::toy();
        assert_eq!(v.id("<pad>").unwrap(), PAD);
        assert_eq!(v.id("<bos>").unwrap(), BOS);
        assert_eq!(v.id("<eos>").unwrap(), EOS);
        assert_eq!(v.id("<seg>").unwrap(), SEG);
        assert_eq!(v.id("[mask]").unwrap(), MASK);
        assert!(v.len() <= 64, "vocab has {} tokens", v.len());
        let segs = v.tokens.iter().filter(|t| *t == "<seg>").count();
        assert_eq!(segs, 1);
    }

    #[test]
    fn every_template_round_trips() {
        let v = Vocabulary::toy();
        let all = QUESTION_TEMPLATES
            .iter()
            .chain(&ANSWER_TEMPLATES)
            .chain(std::iter::once(&REFUSAL_TEMPLATE));
        for t in all {
            for c in COLORS {
                for s in SHAPES {
                    let words = fill_template(t, c, s);
                    let ids = v.encode(&words).unwrap();
                    assert_eq!(v.decode(&ids).unwrap(), words);
                }
            }
        }
    }

    #[test]
    fn red_disk_round_trip() {
        let v = Vocabulary::toy();
        let ids = v.encode_str("red disk").unwrap();
        assert_eq!(v.decode_str(&ids).unwrap(), "red disk");
    }

    #[test]
    fn unknown_word_is_an_encoding_error() {
        let v = Vocabulary::toy();
        let err = v.encode(&["red", "giraffe"]).unwrap_err();
        assert!(matches!(err, Error::Encoding(ref w) if w == "giraffe"));
    }

    #[test]
    fn answers_carry_exactly_one_seg() {
        for t in ANSWER_TEMPLATES {
            assert_eq!(t.split_whitespace().filter(|w| *w == "<seg>").count(), 1);
        }
        assert!(!REFUSAL_TEMPLATE.contains("<seg>"));
    }
}
