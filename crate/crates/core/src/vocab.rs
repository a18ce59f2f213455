//! Closed token vocabulary derived from the lexicon, the number-word
//! inventory and the caption template literals. The derivation is
//! deterministic, so training and evaluation always agree on ids.

use std::collections::HashMap;

use crate::lexicon::ActionLexicon;
use crate::words::all_number_words;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["[pad]", "[bos]", "[eos]", "[unk]"];

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for w in words {
            let w = w.into();
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len());
                tokens.push(w);
            }
        }
        Vocab { tokens, index }
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&self, words: &[String]) -> Vec<usize> {
        words.iter().map(|w| self.id_or_unk(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

/// The full model vocabulary for a lexicon: number words, the interval
/// connective, caption template literals and every action word.
pub fn build_vocab(lexicon: &ActionLexicon) -> Vocab {
    let mut words: Vec<String> = all_number_words();
    words.push("to".to_string());
    words.extend(
        crate::data::caption_template_literals()
            .into_iter()
            .map(str::to_string),
    );
    words.extend(lexicon.all_words());
    Vocab::from_words(words)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first_and_unknowns_map_to_unk() {
        let v = Vocab::from_words(["alpha", "beta", "alpha"]);
        assert_eq!(v.id("[pad]"), Some(PAD));
        assert_eq!(v.id("[bos]"), Some(BOS));
        assert_eq!(v.id("[eos]"), Some(EOS));
        assert_eq!(v.id("alpha"), Some(4));
        assert_eq!(v.id("beta"), Some(5));
        assert_eq!(v.len(), 6);
        assert_eq!(v.id_or_unk("gamma"), UNK);
    }

    #[test]
    fn derivation_is_deterministic() {
        let lex = ActionLexicon::standard(2).unwrap();
        let a = build_vocab(&lex);
        let b = build_vocab(&lex);
        assert_eq!(a.tokens, b.tokens);
        // desk-scale target: on the order of 200 tokens
        assert!(a.len() > 100 && a.len() < 300, "vocab size {}", a.len());
    }
}
