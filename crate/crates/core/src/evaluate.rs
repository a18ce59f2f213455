//! End-to-end evaluation: decode every sample, extract score and action
//! mentions from the generated text, and aggregate the full metric stack
//! into a report.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Sample;
use crate::lexicon::ActionLexicon;
use crate::model::{ModelError, NaeModel};
use crate::text_eval::{
    self, bleu4, cider, extract_eval_info, meteor, nae_map, spearman, tokenize, EvalError,
    EvalReport, SampleEval,
};

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("record line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no records to evaluate")]
    NoRecords,
}

/// One evaluated sample: the generated text next to its gold annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub generated: String,
    pub gold_captions: Vec<String>,
    pub gold_score: f64,
    pub gold_actions: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_actions: Option<Vec<usize>>,
}

/// Generate commentary for every sample with the current checkpoint.
pub fn decode_dataset(model: &NaeModel, samples: &[Sample]) -> Result<Vec<EvalRecord>, EvaluateError> {
    samples
        .iter()
        .map(|s| {
            let gen = model.generate_for_features(&s.features)?;
            Ok(EvalRecord {
                id: s.id.clone(),
                generated: gen.tokens.join(" "),
                gold_captions: s.captions.clone(),
                gold_score: s.score,
                gold_actions: s.actions.clone(),
                pred_score: Some(gen.score_pred),
                pred_actions: Some(gen.action_preds),
            })
        })
        .collect()
}

/// Metric stack over finished records. `score_range` is the training-set
/// score range; a missing extracted score scores the worst-case relative
/// distance of 1.0, and for rank correlation it falls back to the range
/// minimum.
pub fn evaluate_records(
    records: &[EvalRecord],
    lexicon: &ActionLexicon,
    score_range: (f64, f64),
) -> Result<(EvalReport, Vec<SampleEval>), EvaluateError> {
    if records.is_empty() {
        return Err(EvaluateError::NoRecords);
    }
    let (min, max) = score_range;
    let span = max - min;

    let candidates: Vec<Vec<String>> = records.iter().map(|r| tokenize(&r.generated)).collect();
    let references: Vec<Vec<Vec<String>>> = records
        .iter()
        .map(|r| r.gold_captions.iter().map(|c| tokenize(c)).collect())
        .collect();
    let (cider_corpus, cider_per) = cider(&candidates, &references);
    let bleu = bleu4(&candidates, &references);
    let meteor_score = meteor(&candidates, &references);

    let mut samples = Vec::with_capacity(records.len());
    let mut pred_scores = Vec::with_capacity(records.len());
    let mut gold_scores = Vec::with_capacity(records.len());
    let mut acc_sum = 0.0;
    for (i, r) in records.iter().enumerate() {
        let info = extract_eval_info(&r.generated, lexicon);
        let d = match info.score {
            Some(s) => ((s - r.gold_score).abs() / span).powi(2),
            None => 1.0,
        };
        pred_scores.push(info.score.unwrap_or(min));
        gold_scores.push(r.gold_score);
        let gold_pairs: Vec<(usize, usize)> = r
            .gold_actions
            .iter()
            .enumerate()
            .map(|(p, &c)| (p, c))
            .collect();
        let acc = text_eval::action_accuracy(&info.actions, &gold_pairs);
        acc_sum += acc;
        samples.push(SampleEval {
            id: r.id.clone(),
            rel_sq_dist: d,
            cider: cider_per[i],
            action_acc: acc,
        });
    }

    let rho = match spearman(&pred_scores, &gold_scores) {
        Ok(v) => v,
        Err(EvalError::ConstantInput) => f64::NAN,
        Err(e) => return Err(e.into()),
    };
    let r_l2 = 100.0 * samples.iter().map(|s| s.rel_sq_dist).sum::<f64>() / samples.len() as f64;
    let (map, grid) = nae_map(&samples)?;

    let report = EvalReport {
        map,
        rho,
        r_l2,
        bleu4: bleu,
        meteor: meteor_score,
        cider: cider_corpus,
        action_acc: acc_sum / records.len() as f64,
        grid,
    };
    Ok((report, samples))
}

/// Decode and evaluate in one go.
pub fn evaluate(
    model: &NaeModel,
    samples: &[Sample],
) -> Result<(EvalReport, Vec<EvalRecord>), EvaluateError> {
    let records = decode_dataset(model, samples)?;
    let (report, _) = evaluate_records(&records, &model.lexicon, model.partition.range())?;
    Ok((report, records))
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<(), EvaluateError> {
    let mut out = fs::File::create(path)?;
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).expect("record serializes"))?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>, EvaluateError> {
    let file = fs::File::open(path)?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|source| EvaluateError::Json {
                line: lineno + 1,
                source,
            })?,
        );
    }
    Ok(records)
}
