//! Per-part action vocabularies. Each video part has a closed set of action
//! phrases; a class is addressed as (part, class index).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("part {part} has {got} actions, need at least {min}")]
    TooFewActions { part: usize, got: usize, min: usize },
    #[error("no built-in lexicon for {0} parts (max {1})")]
    TooManyParts(usize, usize),
    #[error("class {class} out of range for part {part}")]
    UnknownClass { part: usize, class: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionLexicon {
    /// `parts[p][c]` is the phrase for class `c` of part `p`.
    pub parts: Vec<Vec<String>>,
}

const BUILTIN: [&[&str]; 3] = [
    &[
        "forward somersault",
        "backward somersault",
        "reverse somersault",
        "inward somersault",
        "armstand somersault",
    ],
    &[
        "tuck position",
        "pike position",
        "straight position",
        "free position",
    ],
    &[
        "clean entry",
        "splash entry",
        "angled entry",
        "smooth entry",
    ],
];

impl ActionLexicon {
    /// Built-in phrases for up to three parts.
    pub fn standard(parts: usize) -> Result<Self, LexiconError> {
        if parts == 0 || parts > BUILTIN.len() {
            return Err(LexiconError::TooManyParts(parts, BUILTIN.len()));
        }
        Ok(ActionLexicon {
            parts: BUILTIN[..parts]
                .iter()
                .map(|p| p.iter().map(|s| s.to_string()).collect())
                .collect(),
        })
    }

    pub fn part_count(&self) -> usize {
        self.parts.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.parts.iter().map(|p| p.len()).collect()
    }

    pub fn phrase(&self, part: usize, class: usize) -> Result<&str, LexiconError> {
        self.parts
            .get(part)
            .and_then(|p| p.get(class))
            .map(String::as_str)
            .ok_or(LexiconError::UnknownClass { part, class })
    }

    pub fn phrase_tokens(&self, part: usize, class: usize) -> Result<Vec<String>, LexiconError> {
        Ok(self
            .phrase(part, class)?
            .split_whitespace()
            .map(str::to_string)
            .collect())
    }

    /// Require at least `min` actions per part (the synthetic generator
    /// needs variety to be meaningful).
    pub fn require_min_actions(&self, min: usize) -> Result<(), LexiconError> {
        for (part, p) in self.parts.iter().enumerate() {
            if p.len() < min {
                return Err(LexiconError::TooFewActions {
                    part,
                    got: p.len(),
                    min,
                });
            }
        }
        Ok(())
    }

    /// All distinct words across every phrase, in first-seen order.
    pub fn all_words(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for part in &self.parts {
            for phrase in part {
                for w in phrase.split_whitespace() {
                    if !seen.iter().any(|s: &String| s == w) {
                        seen.push(w.to_string());
                    }
                }
            }
        }
        seen
    }

    /// Phrases as token lists with their class, longest phrase first, for
    /// longest-match scanning.
    pub fn phrase_index(&self) -> Vec<(Vec<String>, usize, usize)> {
        let mut out = Vec::new();
        for (part, phrases) in self.parts.iter().enumerate() {
            for (class, phrase) in phrases.iter().enumerate() {
                let toks: Vec<String> =
                    phrase.split_whitespace().map(str::to_string).collect();
                out.push((toks, part, class));
            }
        }
        out.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_lexicon_has_enough_variety() {
        let lex = ActionLexicon::standard(2).unwrap();
        lex.require_min_actions(4).unwrap();
        assert_eq!(lex.part_count(), 2);
        assert_eq!(lex.class_counts(), vec![5, 4]);
        assert_eq!(lex.phrase(0, 0).unwrap(), "forward somersault");
    }

    #[test]
    fn unknown_class_is_an_error() {
        let lex = ActionLexicon::standard(1).unwrap();
        assert!(lex.phrase(0, 99).is_err());
        assert!(lex.phrase(5, 0).is_err());
    }

    #[test]
    fn phrases_are_globally_unique() {
        let lex = ActionLexicon::standard(3).unwrap();
        let mut all: Vec<&String> = lex.parts.iter().flatten().collect();
        let before = all.len();
        all.sort();
        all.dedup();
        assert_eq!(before, all.len());
    }
}
