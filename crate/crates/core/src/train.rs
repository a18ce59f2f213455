//! The training loop: one sample per step in dataset order, AdamW with the
//! warmup/decay schedule, and a per-step loss trace with every component.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::data::Sample;
use crate::model::{ModelError, NaeModel};
use crate::optim::adamw_step;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("empty training set")]
    EmptyDataset,
    #[error("loss diverged at step {step}: total = {total}")]
    Diverged { step: u64, total: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub gen: f64,
    pub ce_s: f64,
    pub mse: f64,
    pub ce_a: f64,
    pub sparse: f64,
    pub sum_v: f64,
}

/// Run the configured number of steps, mutating the model's parameters.
pub fn train(model: &mut NaeModel, dataset: &[Sample]) -> Result<Vec<LossTrace>, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let schedule = model.cfg.schedule();
    let adam = model.cfg.adam();
    let total_steps = model.cfg.total_steps;
    let mut traces = Vec::with_capacity(total_steps as usize);
    for step in 0..total_steps {
        let sample = &dataset[(step as usize) % dataset.len()];
        let out = model.forward_train(sample)?;
        let trace = LossTrace {
            step,
            lr: schedule.lr_at(step),
            total: out.losses.total.item(),
            gen: out.losses.gen.item(),
            ce_s: out.losses.ce_s.item(),
            mse: out.losses.mse.item(),
            ce_a: out.losses.ce_a.item(),
            sparse: out.losses.sparse.item(),
            sum_v: out.sum_v,
        };
        if !trace.total.is_finite() {
            return Err(TrainError::Diverged {
                step,
                total: trace.total,
            });
        }
        out.losses.total.backward()?;
        out.sess.harvest(&mut model.store);
        adamw_step(&mut model.store, &adam, &schedule, step);
        traces.push(trace);
    }
    Ok(traces)
}

pub fn loss_log_csv(traces: &[LossTrace]) -> String {
    let mut out = String::from("step,lr,total,gen,ce_s,mse,ce_a,sparse,sum_v\n");
    for t in traces {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            t.step, t.lr, t.total, t.gen, t.ce_s, t.mse, t.ce_a, t.sparse, t.sum_v
        )
        .unwrap();
    }
    out
}

pub fn write_loss_log(path: &Path, traces: &[LossTrace]) -> Result<(), TrainError> {
    fs::write(path, loss_log_csv(traces))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::gen_synthetic_dataset;
    use crate::lexicon::ActionLexicon;
    use crate::model::NaeModel;
    use crate::score_space::partition_scores;

    fn tiny_setup(total_steps: u64, peak_lr: f64) -> (NaeModel, Vec<Sample>) {
        let mut cfg = RunConfig::default();
        cfg.dim = 8;
        cfg.heads = 2;
        cfg.dec_layers = 1;
        cfg.mlp_hidden = 8;
        cfg.video_tokens = 3;
        cfg.feature_dim = 4;
        cfg.intervals = 3;
        cfg.parts = 1;
        cfg.prompt_slots = 2;
        cfg.slots_per_gap = 1;
        cfg.n_train = 4;
        cfg.n_test = 1;
        cfg.total_steps = total_steps;
        cfg.peak_lr = peak_lr;
        let lexicon = ActionLexicon::standard(cfg.parts).unwrap();
        let (train_set, _) = gen_synthetic_dataset(&cfg, &lexicon).unwrap();
        let scores: Vec<f64> = train_set.iter().map(|s| s.score).collect();
        let partition = partition_scores(&scores, cfg.intervals).unwrap();
        let model = NaeModel::new(cfg, lexicon, partition).unwrap();
        (model, train_set)
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let (mut model, data) = tiny_setup(5, 0.0);
        let before = crate::checkpoint::checkpoint_bytes(&model.store);
        train(&mut model, &data).unwrap();
        assert_eq!(crate::checkpoint::checkpoint_bytes(&model.store), before);
    }

    #[test]
    fn short_run_is_deterministic() {
        let (mut a, data) = tiny_setup(8, 1e-3);
        let ta = train(&mut a, &data).unwrap();
        let (mut b, data_b) = tiny_setup(8, 1e-3);
        let tb = train(&mut b, &data_b).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(
            crate::checkpoint::checkpoint_bytes(&a.store),
            crate::checkpoint::checkpoint_bytes(&b.store)
        );
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let (mut model, _) = tiny_setup(1, 1e-3);
        assert!(matches!(train(&mut model, &[]), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn loss_log_has_header_and_rows() {
        let (mut model, data) = tiny_setup(3, 1e-3);
        let traces = train(&mut model, &data).unwrap();
        let csv = loss_log_csv(&traces);
        assert!(csv.starts_with("step,lr,total,"));
        assert_eq!(csv.lines().count(), 4);
    }
}
