//! Pulling evaluation facts back out of generated commentary: the first
//! numeric score mention and every action phrase the lexicon knows.

use std::collections::BTreeSet;

use crate::lexicon::ActionLexicon;
use crate::text_eval::captions::tokenize;
use crate::words::parse_number_at;

/// A (part, class) pair found in text.
pub type ActionClass = (usize, usize);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExtractedInfo {
    /// First parseable numeric mention, digit form or number words.
    pub score: Option<f64>,
    /// Longest-match lexicon phrases, deduplicated.
    pub actions: BTreeSet<ActionClass>,
}

/// Scan `text` for a score and action mentions. Absence is a valid result;
/// the metrics layer penalizes it.
pub fn extract_eval_info(text: &str, lexicon: &ActionLexicon) -> ExtractedInfo {
    let tokens = tokenize(text);
    let mut info = ExtractedInfo::default();

    for i in 0..tokens.len() {
        if let Ok(v) = tokens[i].parse::<f64>() {
            if v.is_finite() {
                info.score = Some(v);
                break;
            }
        }
        if let Some((v, _consumed)) = parse_number_at(&tokens, i) {
            info.score = Some(v);
            break;
        }
    }

    let index = lexicon.phrase_index();
    let mut i = 0;
    while i < tokens.len() {
        let mut advanced = false;
        for (phrase, part, class) in &index {
            if tokens[i..].starts_with(phrase) {
                info.actions.insert((*part, *class));
                i += phrase.len();
                advanced = true;
                break;
            }
        }
        if !advanced {
            i += 1;
        }
    }
    info
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex() -> ActionLexicon {
        ActionLexicon::standard(2).unwrap()
    }

    #[test]
    fn word_form_score_extracts() {
        let info = extract_eval_info(
            "the athlete scores eighty-five point five points today",
            &lex(),
        );
        assert_eq!(info.score, Some(85.5));
    }

    #[test]
    fn paper_word_form() {
        let info = extract_eval_info("twenty-five point six", &lex());
        assert_eq!(info.score, Some(25.6));
    }

    #[test]
    fn digit_form_score_extracts() {
        let info = extract_eval_info("an 85.5 from the judges", &lex());
        assert_eq!(info.score, Some(85.5));
    }

    #[test]
    fn first_mention_wins() {
        let info = extract_eval_info("ninety point zero then eighty point five", &lex());
        assert_eq!(info.score, Some(90.0));
    }

    #[test]
    fn no_numeric_mention_is_none() {
        let info = extract_eval_info("a lovely dive with a splash", &lex());
        assert_eq!(info.score, None);
    }

    #[test]
    fn actions_longest_match() {
        let info = extract_eval_info(
            "a forward somersault with a tuck position scores ninety point zero",
            &lex(),
        );
        assert!(info.actions.contains(&(0, 0)));
        assert!(info.actions.contains(&(1, 0)));
        assert_eq!(info.actions.len(), 2);
    }

    #[test]
    fn partial_phrases_do_not_match() {
        let info = extract_eval_info("a somersault in pike shape", &lex());
        assert!(info.actions.is_empty());
    }
}
