//! Evaluation metrics: rank correlation and relative squared distance for
//! score prediction, captioning metrics, action accuracy, and the
//! threshold-grid mean average precision that combines all three.

pub mod captions;
pub mod extract;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

pub use captions::{bleu4, cider, meteor, tokenize};
pub use extract::{extract_eval_info, ActionClass, ExtractedInfo};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("length mismatch: {0} predictions vs {1} references")]
    LengthMismatch(usize, usize),
    #[error("correlation undefined for constant input")]
    ConstantInput,
    #[error("degenerate score range [{0}, {1}]")]
    DegenerateRange(f64, f64),
    #[error("no samples to aggregate")]
    NoSamples,
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // ties share the average of their 1-based rank positions
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::LengthMismatch(pred.len(), gold.len()));
    }
    if pred.len() < 2 {
        return Err(EvalError::TooFew {
            need: 2,
            got: pred.len(),
        });
    }
    let rp = average_ranks(pred);
    let rg = average_ranks(gold);
    let n = rp.len() as f64;
    let mp = rp.iter().sum::<f64>() / n;
    let mg = rg.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vg = 0.0;
    for (a, b) in rp.iter().zip(&rg) {
        cov += (a - mp) * (b - mg);
        vp += (a - mp) * (a - mp);
        vg += (b - mg) * (b - mg);
    }
    if vp == 0.0 || vg == 0.0 {
        return Err(EvalError::ConstantInput);
    }
    Ok(cov / (vp * vg).sqrt())
}

/// Relative squared distance to the score range, reported x100:
/// `(100/N) * sum(((|s - s_hat|) / (max - min))^2)`.
pub fn r_l2(pred: &[f64], gold: &[f64], range: (f64, f64)) -> Result<f64, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::LengthMismatch(pred.len(), gold.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::TooFew { need: 1, got: 0 });
    }
    let (min, max) = range;
    if !(max > min) {
        return Err(EvalError::DegenerateRange(min, max));
    }
    let span = max - min;
    let sum: f64 = pred
        .iter()
        .zip(gold)
        .map(|(&p, &g)| ((p - g).abs() / span).powi(2))
        .sum();
    Ok(100.0 * sum / pred.len() as f64)
}

/// Fraction of gold action slots whose class was found in the text.
pub fn action_accuracy(extracted: &BTreeSet<ActionClass>, gold: &[ActionClass]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let hit = gold.iter().filter(|g| extracted.contains(g)).count();
    hit as f64 / gold.len() as f64
}

/// Per-sample quantities feeding the threshold grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub id: String,
    /// Relative squared score distance; 1.0 when no score was extracted.
    pub rel_sq_dist: f64,
    pub cider: f64,
    pub action_acc: f64,
}

pub const R_L2_THRESHOLDS: [f64; 5] = [0.003, 0.005, 0.010, 0.015, 0.020];
pub const CIDER_THRESHOLDS: [f64; 5] = [0.05, 0.10, 0.15, 0.20, 0.25];
pub const ACC_THRESHOLDS: [f64; 4] = [0.25, 0.50, 0.75, 1.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub t_rel: f64,
    pub t_cider: f64,
    pub t_acc: f64,
    pub ap: f64,
}

/// The 5x5x4 threshold grid: each cell's AP is the fraction of samples with
/// `rel_sq_dist <= t_rel`, `cider >= t_cider` and `action_acc >= t_acc`;
/// mAP is the mean over the 100 cells.
pub fn nae_map(samples: &[SampleEval]) -> Result<(f64, Vec<GridCell>), EvalError> {
    if samples.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let n = samples.len() as f64;
    let mut grid = Vec::with_capacity(100);
    let mut total = 0.0;
    for &t_rel in &R_L2_THRESHOLDS {
        for &t_cider in &CIDER_THRESHOLDS {
            for &t_acc in &ACC_THRESHOLDS {
                let pass = samples
                    .iter()
                    .filter(|s| {
                        s.rel_sq_dist <= t_rel && s.cider >= t_cider && s.action_acc >= t_acc
                    })
                    .count();
                let ap = pass as f64 / n;
                total += ap;
                grid.push(GridCell {
                    t_rel,
                    t_cider,
                    t_acc,
                    ap,
                });
            }
        }
    }
    Ok((total / grid.len() as f64, grid))
}

/// Corpus-level evaluation mirroring the benchmark table columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    pub rho: f64,
    pub r_l2: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub cider: f64,
    pub action_acc: f64,
    pub grid: Vec<GridCell>,
}

impl EvalReport {
    /// Structured text rendering: one `name value` line per column, then the
    /// full grid.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "mAP  {:.6}", self.map).unwrap();
        writeln!(out, "rho  {:.6}", self.rho).unwrap();
        writeln!(out, "R-l2 {:.6}", self.r_l2).unwrap();
        writeln!(out, "B4   {:.6}", self.bleu4).unwrap();
        writeln!(out, "M    {:.6}", self.meteor).unwrap();
        writeln!(out, "C    {:.6}", self.cider).unwrap();
        writeln!(out, "Acc  {:.6}", self.action_acc).unwrap();
        writeln!(out, "# grid: t_rel t_cider t_acc ap").unwrap();
        for cell in &self.grid {
            writeln!(
                out,
                "{:.3} {:.2} {:.2} {:.6}",
                cell.t_rel, cell.t_cider, cell.t_acc, cell.ap
            )
            .unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_perfect_and_reversed() {
        let gold = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&gold, &gold).unwrap(), 1.0);
        let rev: Vec<f64> = gold.iter().rev().cloned().collect();
        assert_eq!(spearman(&rev, &gold).unwrap(), -1.0);
    }

    #[test]
    fn spearman_closed_form_case() {
        // ranks differ by one swap: rho = 1 - 6*2/(3*8) = 0.5
        let rho = spearman(&[1.0, 3.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((rho - 0.5).abs() < 1e-12);
    }

    #[test]
    fn spearman_constant_errors() {
        assert!(matches!(
            spearman(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(EvalError::ConstantInput)
        ));
    }

    #[test]
    fn spearman_invariant_under_monotone_transform() {
        let gold = vec![10.0, 40.0, 20.0, 90.0, 55.0];
        let pred = vec![12.0, 30.0, 29.0, 80.0, 51.0];
        let base = spearman(&pred, &gold).unwrap();
        let squashed: Vec<f64> = pred.iter().map(|&p| (p / 10.0).exp()).collect();
        assert!((spearman(&squashed, &gold).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn r_l2_basics() {
        assert_eq!(r_l2(&[5.0, 6.0], &[5.0, 6.0], (0.0, 10.0)).unwrap(), 0.0);
        // one sample off by the full range
        assert_eq!(r_l2(&[10.0], &[0.0], (0.0, 10.0)).unwrap(), 100.0);
        // s=50, s_hat=55, range (0,100): 100 * 0.05^2 = 0.25
        let v = r_l2(&[55.0], &[50.0], (0.0, 100.0)).unwrap();
        assert!((v - 0.25).abs() < 1e-12);
        assert!(matches!(
            r_l2(&[1.0], &[1.0], (5.0, 5.0)),
            Err(EvalError::DegenerateRange(..))
        ));
    }

    #[test]
    fn r_l2_affine_invariance() {
        let pred = vec![12.0, 55.0, 71.0];
        let gold = vec![10.0, 60.0, 70.0];
        let a = r_l2(&pred, &gold, (0.0, 100.0)).unwrap();
        let scale = |v: f64| 3.0 * v - 7.0;
        let pred2: Vec<f64> = pred.iter().map(|&v| scale(v)).collect();
        let gold2: Vec<f64> = gold.iter().map(|&v| scale(v)).collect();
        let b = r_l2(&pred2, &gold2, (scale(0.0), scale(100.0))).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn action_accuracy_fractions() {
        let mut found = BTreeSet::new();
        found.insert((0usize, 1usize));
        found.insert((1, 0));
        found.insert((2, 3));
        let gold = vec![(0, 1), (1, 0), (2, 0), (3, 2)];
        assert_eq!(action_accuracy(&found, &gold), 0.5);
        assert_eq!(action_accuracy(&found, &[(0, 1)]), 1.0);
        assert_eq!(action_accuracy(&BTreeSet::new(), &gold), 0.0);
    }

    fn sample(d: f64, c: f64, a: f64) -> SampleEval {
        SampleEval {
            id: String::new(),
            rel_sq_dist: d,
            cider: c,
            action_acc: a,
        }
    }

    #[test]
    fn map_extremes() {
        let perfect = vec![sample(0.0, 10.0, 1.0); 5];
        let (map, grid) = nae_map(&perfect).unwrap();
        assert_eq!(map, 1.0);
        assert_eq!(grid.len(), 100);
        let hopeless = vec![sample(1.0, 0.0, 0.0); 5];
        let (map, _) = nae_map(&hopeless).unwrap();
        assert_eq!(map, 0.0);
        assert!(matches!(nae_map(&[]), Err(EvalError::NoSamples)));
    }

    #[test]
    fn map_monotone_in_sample_quality() {
        let base = vec![
            sample(0.004, 0.12, 0.5),
            sample(0.8, 0.01, 0.25),
            sample(0.001, 5.0, 1.0),
        ];
        let (m0, _) = nae_map(&base).unwrap();
        let mut better = base.clone();
        better[1].rel_sq_dist = 0.002;
        better[1].cider = 0.3;
        better[1].action_acc = 1.0;
        let (m1, _) = nae_map(&better).unwrap();
        assert!(m1 >= m0);
    }

    #[test]
    fn report_text_is_stable() {
        let report = EvalReport {
            map: 0.5,
            rho: 0.25,
            r_l2: 1.5,
            bleu4: 0.75,
            meteor: 0.5,
            cider: 5.0,
            action_acc: 1.0,
            grid: vec![GridCell {
                t_rel: 0.003,
                t_cider: 0.05,
                t_acc: 0.25,
                ap: 0.5,
            }],
        };
        let a = report.to_text();
        assert!(a.contains("mAP  0.500000"));
        assert!(a.contains("0.003 0.05 0.25 0.500000"));
        assert_eq!(a, report.to_text());
    }
}
