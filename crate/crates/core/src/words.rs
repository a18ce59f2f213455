//! English rendering of scores and the inverse parser.
//!
//! Numbers in 0..1000 become cardinal words ("ninety-eight"), followed by
//! "point" and digit-by-digit words for any fractional part, so 98.75 reads
//! "ninety-eight point seven five". The parser inverts this exactly at the
//! rendered precision.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum WordsError {
    #[error("value {0} outside [0, 1000)")]
    OutOfRange(f64),
    #[error("unsupported decimal count {0}, expected 0..=2")]
    BadDecimals(usize),
    #[error("cannot parse number words at {0:?}")]
    Parse(String),
}

const UNITS: [&str; 20] = [
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
];

const TENS: [&str; 8] = [
    "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety",
];

fn units_value(word: &str) -> Option<u32> {
    UNITS.iter().position(|&w| w == word).map(|i| i as u32)
}

fn tens_value(word: &str) -> Option<u32> {
    TENS.iter().position(|&w| w == word).map(|i| (i as u32 + 2) * 10)
}

fn digit_value(word: &str) -> Option<u32> {
    UNITS[..10].iter().position(|&w| w == word).map(|i| i as u32)
}

/// Words for an integer in 0..1000. Compound tens are hyphenated.
fn integer_words(n: u32) -> Vec<String> {
    debug_assert!(n < 1000);
    let mut out = Vec::new();
    let mut n = n;
    if n >= 100 {
        out.push(UNITS[(n / 100) as usize].to_string());
        out.push("hundred".to_string());
        n %= 100;
        if n == 0 {
            return out;
        }
    } else if n == 0 {
        return vec!["zero".to_string()];
    }
    if n < 20 {
        out.push(UNITS[n as usize].to_string());
    } else {
        let tens = TENS[(n / 10 - 2) as usize];
        if n % 10 == 0 {
            out.push(tens.to_string());
        } else {
            out.push(format!("{tens}-{}", UNITS[(n % 10) as usize]));
        }
    }
    out
}

/// Render `x` at the given number of decimals as word tokens.
pub fn number_to_words(x: f64, decimals: usize) -> Result<Vec<String>, WordsError> {
    if decimals > 2 {
        return Err(WordsError::BadDecimals(decimals));
    }
    if !x.is_finite() || x < 0.0 || x >= 1000.0 {
        return Err(WordsError::OutOfRange(x));
    }
    let rendered = format!("{x:.decimals$}");
    let (int_part, frac_part) = match rendered.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (rendered.as_str(), None),
    };
    let n: u32 = int_part.parse().map_err(|_| WordsError::OutOfRange(x))?;
    if n >= 1000 {
        // e.g. 999.96 rounding up at one decimal
        return Err(WordsError::OutOfRange(x));
    }
    let mut words = integer_words(n);
    if let Some(frac) = frac_part {
        words.push("point".to_string());
        for d in frac.chars() {
            let digit = d.to_digit(10).expect("formatted digit");
            words.push(UNITS[digit as usize].to_string());
        }
    }
    Ok(words)
}

/// Parse a number-word sequence starting at `tokens[start]`.
///
/// Returns the value and the number of tokens consumed, or `None` when the
/// tokens do not begin a number. Accepts both hyphenated compounds
/// ("twenty-five") and the split form ("twenty five").
pub fn parse_number_at(tokens: &[String], start: usize) -> Option<(f64, usize)> {
    let mut i = start;
    let first = tokens.get(i)?;

    let mut int_val: u32;
    if let Some((t, u)) = split_compound(first) {
        int_val = t + u;
        i += 1;
    } else if let Some(t) = tens_value(first) {
        int_val = t;
        i += 1;
        if let Some(next) = tokens.get(i) {
            if let Some(u) = digit_value(next) {
                if u > 0 {
                    int_val += u;
                    i += 1;
                }
            }
        }
    } else if let Some(u) = units_value(first) {
        int_val = u;
        i += 1;
    } else {
        return None;
    }

    // optional "<unit> hundred [rest]"
    if int_val >= 1 && int_val <= 9 && tokens.get(i).map(String::as_str) == Some("hundred") {
        i += 1;
        int_val *= 100;
        if let Some(next) = tokens.get(i) {
            if let Some((t, u)) = split_compound(next) {
                int_val += t + u;
                i += 1;
            } else if let Some(t) = tens_value(next) {
                int_val += t;
                i += 1;
                if let Some(after) = tokens.get(i) {
                    if let Some(u) = digit_value(after) {
                        if u > 0 {
                            int_val += u;
                            i += 1;
                        }
                    }
                }
            } else if let Some(u) = units_value(next) {
                // "one hundred seven"; "zero" is not a valid continuation
                if u > 0 && u < 20 {
                    int_val += u;
                    i += 1;
                }
            }
        }
    }

    // optional "point" followed by digit words
    let mut digits = String::new();
    if tokens.get(i).map(String::as_str) == Some("point") {
        let mut j = i + 1;
        while let Some(tok) = tokens.get(j) {
            match digit_value(tok) {
                Some(d) => {
                    digits.push(char::from_digit(d, 10).unwrap());
                    j += 1;
                }
                None => break,
            }
        }
        if !digits.is_empty() {
            i = j;
        }
    }

    let text = if digits.is_empty() {
        int_val.to_string()
    } else {
        format!("{int_val}.{digits}")
    };
    let value: f64 = text.parse().ok()?;
    Some((value, i - start))
}

fn split_compound(token: &str) -> Option<(u32, u32)> {
    let (tens, unit) = token.split_once('-')?;
    let t = tens_value(tens)?;
    let u = digit_value(unit)?;
    if u == 0 {
        return None;
    }
    Some((t, u))
}

/// Every distinct word the renderer can emit for values in [0, 1000),
/// including "point", in a stable order.
pub fn all_number_words() -> Vec<String> {
    let mut out: Vec<String> = UNITS.iter().map(|s| s.to_string()).collect();
    for t in TENS {
        out.push(t.to_string());
        for u in &UNITS[1..10] {
            out.push(format!("{t}-{u}"));
        }
    }
    out.push("hundred".to_string());
    out.push("point".to_string());
    out
}

/// Strict inverse of [`number_to_words`]: the whole token slice must be one
/// number.
pub fn words_to_number(tokens: &[String]) -> Result<f64, WordsError> {
    match parse_number_at(tokens, 0) {
        Some((v, consumed)) if consumed == tokens.len() => Ok(v),
        _ => Err(WordsError::Parse(tokens.join(" "))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn to_text(x: f64, decimals: usize) -> String {
        number_to_words(x, decimals).unwrap().join(" ")
    }

    #[test]
    fn paper_style_examples() {
        assert_eq!(to_text(25.6, 1), "twenty-five point six");
        assert_eq!(to_text(36.3, 1), "thirty-six point three");
        assert_eq!(to_text(0.0, 0), "zero");
        assert_eq!(to_text(98.75, 2), "ninety-eight point seven five");
    }

    #[test]
    fn hundreds_and_teens() {
        assert_eq!(to_text(100.0, 0), "one hundred");
        assert_eq!(to_text(115.0, 0), "one hundred fifteen");
        assert_eq!(to_text(999.9, 1), "nine hundred ninety-nine point nine");
        assert_eq!(to_text(205.0, 0), "two hundred five");
        assert_eq!(to_text(90.0, 1), "ninety point zero");
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(matches!(
            number_to_words(1000.0, 1),
            Err(WordsError::OutOfRange(_))
        ));
        assert!(matches!(
            number_to_words(-0.5, 1),
            Err(WordsError::OutOfRange(_))
        ));
        assert!(matches!(
            number_to_words(999.99, 1),
            Err(WordsError::OutOfRange(_))
        ));
        assert!(matches!(
            number_to_words(1.0, 3),
            Err(WordsError::BadDecimals(3))
        ));
    }

    #[test]
    fn split_tens_form_parses() {
        let toks: Vec<String> = ["twenty", "five", "point", "six"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(words_to_number(&toks).unwrap(), 25.6);
    }

    #[test]
    fn unparseable_stream_errors() {
        let toks: Vec<String> = ["somersault"].iter().map(|s| s.to_string()).collect();
        assert!(words_to_number(&toks).is_err());
        let trailing: Vec<String> = ["five", "points"].iter().map(|s| s.to_string()).collect();
        assert!(words_to_number(&trailing).is_err());
    }

    #[test]
    fn exact_roundtrip_on_two_decimal_grid_sample() {
        for i in (0..100_000).step_by(37) {
            let x = i as f64 / 100.0;
            let words = number_to_words(x, 2).unwrap();
            assert_eq!(words_to_number(&words).unwrap(), x, "at {x}");
        }
    }

    proptest! {
        #[test]
        fn roundtrip_one_decimal(i in 0u32..10_000) {
            let x = i as f64 / 10.0;
            let words = number_to_words(x, 1).unwrap();
            prop_assert_eq!(words_to_number(&words).unwrap(), x);
        }

        #[test]
        fn roundtrip_integers(i in 0u32..1000) {
            let x = i as f64;
            let words = number_to_words(x, 0).unwrap();
            prop_assert_eq!(words_to_number(&words).unwrap(), x);
        }
    }
}
