//! Caption metrics: corpus BLEU-4, METEOR with exact+stem unigram matching,
//! and TF-IDF n-gram CIDEr.

use std::collections::HashMap;

/// Lowercase word tokens with boundary punctuation stripped. Interior
/// hyphens ("twenty-five") and decimal points ("85.5") survive.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let lower = raw.to_lowercase();
            let trimmed = lower.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.to_string())
            }
        })
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

const BLEU_EPS: f64 = 1e-9;

/// Corpus BLEU-4: geometric mean of modified n-gram precisions (n = 1..4)
/// times the brevity penalty. Zero counts are smoothed with a tiny epsilon.
pub fn bleu4(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> f64 {
    assert_eq!(candidates.len(), references.len());
    let mut matched = [0u64; 4];
    let mut total = [0u64; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        // effective reference length: closest to the candidate, ties to the
        // shorter reference
        if let Some(best) = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
        {
            ref_len += best;
        }
        for n in 1..=4 {
            let cc = ngram_counts(cand, n);
            let mut max_ref: HashMap<&[String], u64> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &cc {
                total[n - 1] += c;
                matched[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
            }
        }
    }

    if cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = if total[n] == 0 {
            BLEU_EPS
        } else if matched[n] == 0 {
            BLEU_EPS / total[n] as f64
        } else {
            matched[n] as f64 / total[n] as f64
        };
        log_sum += p.ln() / 4.0;
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * log_sum.exp()
}

/// Strip one common suffix for the crude stem match.
fn stem(word: &str) -> &str {
    for suffix in ["ing", "ed", "es", "s"] {
        if let Some(rest) = word.strip_suffix(suffix) {
            if rest.len() >= 3 {
                return rest;
            }
        }
    }
    word
}

const METEOR_ALPHA: f64 = 0.9;
const METEOR_BETA: f64 = 3.0;
const METEOR_GAMMA: f64 = 0.5;

/// One candidate against one reference: greedy exact alignment, then stem
/// alignment over the leftovers, combined into F_mean with a chunk penalty.
fn meteor_sentence(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    // alignment[i] = index into reference matched by candidate word i
    let mut alignment: Vec<Option<usize>> = vec![None; cand.len()];
    let mut ref_used = vec![false; reference.len()];
    for stage in 0..2 {
        for (i, w) in cand.iter().enumerate() {
            if alignment[i].is_some() {
                continue;
            }
            for (j, r) in reference.iter().enumerate() {
                if ref_used[j] {
                    continue;
                }
                let hit = if stage == 0 {
                    w == r
                } else {
                    stem(w) == stem(r)
                };
                if hit {
                    alignment[i] = Some(j);
                    ref_used[j] = true;
                    break;
                }
            }
        }
    }
    let pairs: Vec<(usize, usize)> = alignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .collect();
    let m = pairs.len() as f64;
    if pairs.is_empty() {
        return 0.0;
    }
    let precision = m / cand.len() as f64;
    let recall = m / reference.len() as f64;
    let f_mean = precision * recall / (METEOR_ALPHA * precision + (1.0 - METEOR_ALPHA) * recall);
    // chunks: runs contiguous in both candidate and reference order
    let mut chunks = 1usize;
    for w in pairs.windows(2) {
        let ((ci, ri), (cj, rj)) = (w[0], w[1]);
        if cj != ci + 1 || rj != ri + 1 {
            chunks += 1;
        }
    }
    let penalty = METEOR_GAMMA * (chunks as f64 / m).powf(METEOR_BETA);
    f_mean * (1.0 - penalty)
}

/// Corpus METEOR: per sample, the best score over its references; corpus
/// value is the mean.
pub fn meteor(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> f64 {
    assert_eq!(candidates.len(), references.len());
    if candidates.is_empty() {
        return 0.0;
    }
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(cand, refs)| {
            refs.iter()
                .map(|r| meteor_sentence(cand, r))
                .fold(0.0, f64::max)
        })
        .sum();
    total / candidates.len() as f64
}

const CIDER_MAX_N: usize = 4;
const CIDER_SCALE: f64 = 10.0;

fn owned_ngram_counts(tokens: &[String], n: usize) -> HashMap<Vec<String>, f64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    counts
}

fn cosine(
    a: &HashMap<Vec<String>, f64>,
    b: &HashMap<Vec<String>, f64>,
    idf: &HashMap<Vec<String>, f64>,
    default_idf: f64,
) -> f64 {
    let weight = |g: &Vec<String>, tf: f64| tf * idf.get(g).copied().unwrap_or(default_idf);
    let dot: f64 = a
        .iter()
        .map(|(g, &tf)| {
            let wa = weight(g, tf);
            let wb = b.get(g).map(|&tb| weight(g, tb)).unwrap_or(0.0);
            wa * wb
        })
        .sum();
    let na: f64 = a.iter().map(|(g, &tf)| weight(g, tf).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|(g, &tf)| weight(g, tf).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// CIDEr: per n-gram order, TF-IDF cosine between the candidate and each
/// reference (document frequency over the reference sets), averaged over
/// references and n = 1..4, scaled by 10. Returns the corpus mean and the
/// per-sample scores.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> (f64, Vec<f64>) {
    assert_eq!(candidates.len(), references.len());
    let n_docs = references.len();
    if n_docs == 0 {
        return (0.0, Vec::new());
    }
    // document frequency per n: number of samples whose reference set
    // contains the n-gram
    let mut idf: Vec<HashMap<Vec<String>, f64>> = vec![HashMap::new(); CIDER_MAX_N];
    for refs in references {
        for n in 1..=CIDER_MAX_N {
            let mut seen: HashMap<Vec<String>, bool> = HashMap::new();
            for r in refs {
                for (g, _) in owned_ngram_counts(r, n) {
                    seen.insert(g, true);
                }
            }
            for g in seen.into_keys() {
                *idf[n - 1].entry(g).or_insert(0.0) += 1.0;
            }
        }
    }
    // df -> idf, clamping df to at least 1 for unseen n-grams
    let default_idf = (n_docs as f64).ln();
    for table in &mut idf {
        for v in table.values_mut() {
            *v = (n_docs as f64 / v.max(1.0)).ln();
        }
    }

    let per_sample: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(cand, refs)| {
            let mut acc = 0.0;
            for n in 1..=CIDER_MAX_N {
                let cv = owned_ngram_counts(cand, n);
                let sim: f64 = refs
                    .iter()
                    .map(|r| {
                        let rv = owned_ngram_counts(r, n);
                        cosine(&cv, &rv, &idf[n - 1], default_idf)
                    })
                    .sum::<f64>()
                    / refs.len().max(1) as f64;
                acc += sim / CIDER_MAX_N as f64;
            }
            acc * CIDER_SCALE
        })
        .collect();
    let corpus = per_sample.iter().sum::<f64>() / n_docs as f64;
    (corpus, per_sample)
}
