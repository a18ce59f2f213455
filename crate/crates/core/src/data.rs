//! Synthetic dataset generation and line-delimited dataset files.
//!
//! Each sample draws per-part action classes and a score, embeds the labels
//! through a fixed seeded linear map into video features (plus optional
//! Gaussian noise), and renders captions from fixed sentence templates so
//! that every gold label can be parsed back out of the text verbatim.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::lexicon::{ActionLexicon, LexiconError};
use crate::tensor::{Tensor, TensorError};
use crate::words::{number_to_words, WordsError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("sample {id}: bad feature payload: {why}")]
    BadPayload { id: String, why: String },
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Words(#[from] WordsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("caption has {got} tokens, limit {limit}")]
    CaptionTooLong { got: usize, limit: usize },
}

/// One annotated video stand-in.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[video_tokens, feature_dim]` raw features.
    pub features: Tensor,
    pub captions: Vec<String>,
    pub score: f64,
    /// One class per part.
    pub actions: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    rows: usize,
    cols: usize,
    features_b64: String,
    captions: Vec<String>,
    score: f64,
    actions: Vec<usize>,
}

pub const N_CAPTION_TEMPLATES: usize = 5;

/// Every literal word the caption templates can emit. Kept free of number
/// words and lexicon words so extraction stays unambiguous.
pub fn caption_template_literals() -> Vec<&'static str> {
    vec![
        "the", "athlete", "performs", "a", "with", "and", "scores", "points", "earns", "score",
        "of", "from", "judges", "award", "for", "an", "impressive", "routine", "shows", "scoring",
        "is", "executed", "well", "receives",
    ]
}

fn actions_clause(phrases: &[&str]) -> Vec<String> {
    let mut out = Vec::new();
    for (i, p) in phrases.iter().enumerate() {
        if i > 0 {
            out.push("with".into());
        }
        out.push("a".into());
        out.extend(p.split_whitespace().map(str::to_string));
    }
    out
}

/// Render caption `variant` with the given action phrases and score words.
pub fn caption_tokens(variant: usize, phrases: &[&str], score_words: &[String]) -> Vec<String> {
    let ac = actions_clause(phrases);
    let s = score_words;
    let lit = |w: &str| w.to_string();
    let mut out: Vec<String> = Vec::new();
    match variant % N_CAPTION_TEMPLATES {
        0 => {
            out.extend(["the", "athlete", "performs"].map(lit));
            out.extend(ac);
            out.extend(["and", "scores"].map(lit));
            out.extend(s.iter().cloned());
            out.push(lit("points"));
        }
        1 => {
            out.extend(ac);
            out.extend(["earns", "a", "score", "of"].map(lit));
            out.extend(s.iter().cloned());
            out.extend(["from", "the", "judges"].map(lit));
        }
        2 => {
            out.extend(["the", "judges", "award"].map(lit));
            out.extend(s.iter().cloned());
            out.extend(["points", "for"].map(lit));
            out.extend(ac);
        }
        3 => {
            out.extend(["an", "impressive", "routine", "shows"].map(lit));
            out.extend(ac);
            out.push(lit("scoring"));
            out.extend(s.iter().cloned());
            out.push(lit("points"));
        }
        _ => {
            out.extend(ac);
            out.extend(["is", "executed", "well", "and", "receives"].map(lit));
            out.extend(s.iter().cloned());
            out.push(lit("points"));
        }
    }
    out
}

/// Deterministic label-to-feature embedding. Depends only on the seed and
/// the dimensions, never on the sample stream.
struct LabelEmbedding {
    weights: Vec<f64>, // [label_dim, video_tokens * feature_dim]
    label_dim: usize,
}

impl LabelEmbedding {
    fn new(seed: u64, class_counts: &[usize], out_len: usize) -> Self {
        let label_dim: usize = class_counts.iter().sum::<usize>() + 1;
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let scale = 1.0 / (label_dim as f64).sqrt();
        let weights = (0..label_dim * out_len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        LabelEmbedding { weights, label_dim }
    }

    fn embed(&self, class_counts: &[usize], actions: &[usize], score_norm: f64, out_len: usize) -> Vec<f64> {
        let mut label = vec![0.0; self.label_dim];
        let mut at = 0;
        for (part, &count) in class_counts.iter().enumerate() {
            label[at + actions[part]] = 1.0;
            at += count;
        }
        label[at] = score_norm;
        let mut out = vec![0.0; out_len];
        for (i, &l) in label.iter().enumerate() {
            if l == 0.0 {
                continue;
            }
            for j in 0..out_len {
                out[j] += l * self.weights[i * out_len + j];
            }
        }
        out
    }
}

/// Draw `n_train + n_test` samples and split them in order.
pub fn gen_synthetic_dataset(
    cfg: &RunConfig,
    lexicon: &ActionLexicon,
) -> Result<(Vec<Sample>, Vec<Sample>), DataError> {
    lexicon.require_min_actions(4)?;
    let class_counts = lexicon.class_counts();
    let m = cfg.video_tokens;
    let d_in = cfg.feature_dim;
    let embedding = LabelEmbedding::new(cfg.seed, &class_counts, m * d_in);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);

    let scale = 10u64.pow(cfg.score_decimals as u32) as f64;
    let lo = (cfg.score_min * scale).round() as u64;
    let hi = (cfg.score_max * scale).round() as u64;

    let total = cfg.n_train + cfg.n_test;
    let mut samples = Vec::with_capacity(total);
    for i in 0..total {
        let actions: Vec<usize> = class_counts
            .iter()
            .map(|&c| rng.random_range(0..c))
            .collect();
        let score = rng.random_range(lo..=hi) as f64 / scale;
        let score_norm = (score - cfg.score_min) / (cfg.score_max - cfg.score_min);

        let mut features = embedding.embed(&class_counts, &actions, score_norm, m * d_in);
        if cfg.noise_sigma > 0.0 {
            for f in &mut features {
                let z: f64 = StandardNormal.sample(&mut rng);
                *f += cfg.noise_sigma * z;
            }
        }

        let phrases: Vec<&str> = actions
            .iter()
            .enumerate()
            .map(|(p, &c)| lexicon.phrase(p, c))
            .collect::<Result<_, _>>()?;
        let score_words = number_to_words(score, cfg.score_decimals)?;
        let mut captions = Vec::with_capacity(cfg.captions_per_sample);
        for _ in 0..cfg.captions_per_sample {
            let variant = rng.random_range(0..N_CAPTION_TEMPLATES);
            let tokens = caption_tokens(variant, &phrases, &score_words);
            if tokens.len() > cfg.max_caption_len {
                return Err(DataError::CaptionTooLong {
                    got: tokens.len(),
                    limit: cfg.max_caption_len,
                });
            }
            captions.push(tokens.join(" "));
        }

        samples.push(Sample {
            id: format!("s{i:05}"),
            features: Tensor::new(vec![m, d_in], features)?,
            captions,
            score,
            actions,
        });
    }
    let test = samples.split_off(cfg.n_train);
    Ok((samples, test))
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<(), DataError> {
    let mut out = fs::File::create(path)?;
    for s in samples {
        let bytes: Vec<u8> = s
            .features
            .data
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let record = SampleRecord {
            id: s.id.clone(),
            rows: s.features.shape[0],
            cols: s.features.shape[1],
            features_b64: BASE64.encode(&bytes),
            captions: s.captions.clone(),
            score: s.score,
            actions: s.actions.clone(),
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>, DataError> {
    let file = fs::File::open(path)?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line).map_err(|source| DataError::Json {
            line: lineno + 1,
            source,
        })?;
        let bytes = BASE64
            .decode(record.features_b64.as_bytes())
            .map_err(|e| DataError::BadPayload {
                id: record.id.clone(),
                why: e.to_string(),
            })?;
        let expect = record.rows * record.cols * 8;
        if bytes.len() != expect {
            return Err(DataError::BadPayload {
                id: record.id,
                why: format!("expected {expect} bytes, got {}", bytes.len()),
            });
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        samples.push(Sample {
            id: record.id,
            features: Tensor::new(vec![record.rows, record.cols], data)?,
            captions: record.captions,
            score: record.score,
            actions: record.actions,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text_eval::extract_eval_info;
    use std::collections::BTreeSet;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.n_train = 12;
        cfg.n_test = 4;
        cfg
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let lex = ActionLexicon::standard(cfg.parts).unwrap();
        let (a_train, a_test) = gen_synthetic_dataset(&cfg, &lex).unwrap();
        let (b_train, b_test) = gen_synthetic_dataset(&cfg, &lex).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
        assert_eq!(a_train.len(), 12);
        assert_eq!(a_test.len(), 4);
    }

    #[test]
    fn zero_noise_features_are_label_determined() {
        let mut cfg = small_cfg();
        cfg.noise_sigma = 0.0;
        cfg.n_train = 40;
        let lex = ActionLexicon::standard(cfg.parts).unwrap();
        let (train, _) = gen_synthetic_dataset(&cfg, &lex).unwrap();
        for a in &train {
            for b in &train {
                if a.actions == b.actions && a.score == b.score {
                    assert_eq!(a.features.data, b.features.data);
                }
            }
        }
    }

    #[test]
    fn every_caption_roundtrips_gold_labels() {
        let cfg = small_cfg();
        let lex = ActionLexicon::standard(cfg.parts).unwrap();
        let (train, test) = gen_synthetic_dataset(&cfg, &lex).unwrap();
        for s in train.iter().chain(&test) {
            let gold: BTreeSet<(usize, usize)> = s
                .actions
                .iter()
                .enumerate()
                .map(|(p, &c)| (p, c))
                .collect();
            for caption in &s.captions {
                let info = extract_eval_info(caption, &lex);
                assert_eq!(info.score, Some(s.score), "caption {caption:?}");
                assert_eq!(info.actions, gold, "caption {caption:?}");
            }
        }
    }

    #[test]
    fn dataset_file_roundtrip() {
        let cfg = small_cfg();
        let lex = ActionLexicon::standard(cfg.parts).unwrap();
        let (train, _) = gen_synthetic_dataset(&cfg, &lex).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        write_dataset(&path, &train).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(train, back);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let cfg = small_cfg();
        let lex = ActionLexicon::standard(cfg.parts).unwrap();
        let (train, _) = gen_synthetic_dataset(&cfg, &lex).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        write_dataset(&path, &train[..1]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        // chop some payload characters out of the base64 field
        let broken = text.replacen("features_b64\":\"", "features_b64\":\"AAAA", 1);
        fs::write(&path, broken).unwrap();
        assert!(read_dataset(&path).is_err());
    }

    #[test]
    fn caption_tokens_stay_within_vocab() {
        let lex = ActionLexicon::standard(3).unwrap();
        let vocab = crate::vocab::build_vocab(&lex);
        let score_words = number_to_words(98.7, 1).unwrap();
        let phrases: Vec<&str> = vec![
            lex.phrase(0, 4).unwrap(),
            lex.phrase(1, 3).unwrap(),
            lex.phrase(2, 0).unwrap(),
        ];
        for variant in 0..N_CAPTION_TEMPLATES {
            for tok in caption_tokens(variant, &phrases, &score_words) {
                assert!(vocab.id(&tok).is_some(), "{tok:?} missing from vocab");
            }
        }
    }
}
