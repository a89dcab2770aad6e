//! Epoch loop shared by BPR and APR training, and the per-epoch history.

use std::io::Write;
use std::time::Instant;

use log::{debug, info};

use crate::bpr::TrainConfig;
use crate::dataset::{SplitDataset, Target, Triplet};
use crate::error::{Error, Result};
use crate::evaluator::evaluate;
use crate::model::{FactorModel, Stage};
use crate::rng;

/// Cutoff used for validation tracking.
pub const VALIDATION_CUTOFF: usize = 100;

/// Sampler substream index for training from scratch.
pub const PRETRAIN_PHASE: u64 = 0;
/// Sampler substream index for continuing a trained model (BPR or APR).
pub const CONTINUE_PHASE: u64 = 1;

/// Totals reported by one batch step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchStats {
    pub instances: usize,
    pub loss_sum: f64,
    /// Sum over instances of `l_adv(delta_adv) - l_adv(0)` (APR only).
    pub ladv_gain_sum: Option<f64>,
}

/// One row of training history. Epoch 0 describes the starting model.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    /// Mean per-instance training loss over the epoch.
    pub loss: Option<f64>,
    pub val_hr: Option<f64>,
    pub val_ndcg: Option<f64>,
    pub emb_norm: f64,
    /// Seconds since the start of the phase.
    pub seconds: f64,
    /// Mean per-batch gain of the adversarial objective from the perturbation.
    pub ladv_gain: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last epoch run.
    pub model: FactorModel,
    /// Best-validation checkpoint and the epoch it was taken at.
    pub best: Option<(usize, FactorModel)>,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    /// Best-validation model, or the final one when validation is absent.
    pub fn best_model(&self) -> &FactorModel {
        self.best.as_ref().map_or(&self.model, |(_, m)| m)
    }
}

fn validation(split: &SplitDataset, model: &FactorModel) -> Result<Option<(f64, f64)>> {
    if !split.has_validation() {
        return Ok(None);
    }
    let report = evaluate(model, split, &[VALIDATION_CUTOFF], Target::Validation)?;
    Ok(Some((report.hr(VALIDATION_CUTOFF), report.ndcg(VALIDATION_CUTOFF))))
}

/// Runs `config.epochs` epochs of `ceil(M / batch_size)` batches, sampling a
/// fresh batch of triplets for each step.
///
/// With `patience`, training stops once that many consecutive validation
/// evaluations fail to improve on the best NDCG.
pub(crate) fn run_epochs<F>(
    split: &SplitDataset,
    mut model: FactorModel,
    config: &TrainConfig,
    stage: Stage,
    phase: u64,
    patience: Option<usize>,
    mut step: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&mut FactorModel, &[Triplet]) -> Result<BatchStats>,
{
    let train = &split.train;
    let start = Instant::now();
    let mut rng = rng::indexed_stream(config.seed, rng::SAMPLER, phase);
    let m = train.n_interactions();
    let n_batches = m.div_ceil(config.batch_size);

    let initial = validation(split, &model)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        stage,
        loss: None,
        val_hr: initial.map(|v| v.0),
        val_ndcg: initial.map(|v| v.1),
        emb_norm: model.embedding_norm(),
        seconds: 0.0,
        ladv_gain: None,
    }];
    let mut best = initial.map(|(_, ndcg)| (ndcg, 0, model.clone()));
    let mut stale = 0;
    let mut stopped_early = false;

    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        let mut gain_sum = 0.0;
        let mut has_gain = false;
        for b in 0..n_batches {
            let size = config.batch_size.min(m - b * config.batch_size);
            batch.clear();
            for _ in 0..size {
                batch.push(train.sample_triplet(None, &mut rng)?);
            }
            let stats = step(&mut model, &batch).map_err(|e| match e {
                Error::NonFinite { stage, .. } => Error::NonFinite {
                    stage,
                    epoch,
                    batch: b + 1,
                },
                other => other,
            })?;
            loss_sum += stats.loss_sum;
            if let Some(gain) = stats.ladv_gain_sum {
                gain_sum += gain / stats.instances as f64;
                has_gain = true;
            }
        }
        model.stage = stage;
        model.seed = config.seed;

        let evaluate_now = epoch % config.eval_every == 0 || epoch == config.epochs;
        let val = if evaluate_now { validation(split, &model)? } else { None };
        let record = EpochRecord {
            epoch,
            stage,
            loss: Some(loss_sum / m as f64),
            val_hr: val.map(|v| v.0),
            val_ndcg: val.map(|v| v.1),
            emb_norm: model.embedding_norm(),
            seconds: start.elapsed().as_secs_f64(),
            ladv_gain: has_gain.then(|| gain_sum / n_batches as f64),
        };
        debug!("{stage} epoch {epoch}: loss {:.6}", loss_sum / m as f64);
        if let Some((hr, ndcg)) = val {
            info!("{stage} epoch {epoch}: val hr@100 {hr:.4} ndcg@100 {ndcg:.4}");
            if best.as_ref().is_none_or(|(best_ndcg, _, _)| ndcg > *best_ndcg) {
                best = Some((ndcg, epoch, model.clone()));
                stale = 0;
            } else {
                stale += 1;
            }
        }
        history.push(record);
        if patience.is_some_and(|p| stale >= p) {
            info!("{stage}: no validation improvement in {stale} evaluations, stopping at epoch {epoch}");
            stopped_early = true;
            break;
        }
    }

    Ok(TrainOutcome {
        model,
        best: best.map(|(_, epoch, m)| (epoch, m)),
        history,
        stopped_early,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

/// Writes history as CSV:
/// `epoch,stage,loss,val_hr@100,val_ndcg@100,emb_norm,seconds`, plus a
/// trailing `mean_batch_ladv_gain` column when any row comes from APR.
pub fn write_history<W: Write>(out: &mut W, history: &[EpochRecord]) -> std::io::Result<()> {
    let with_gain = history.iter().any(|r| r.stage == Stage::Apr);
    write!(out, "epoch,stage,loss,val_hr@100,val_ndcg@100,emb_norm,seconds")?;
    if with_gain {
        write!(out, ",mean_batch_ladv_gain")?;
    }
    writeln!(out)?;
    for r in history {
        write!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.stage,
            opt(r.loss),
            opt(r.val_hr),
            opt(r.val_ndcg),
            r.emb_norm,
            r.seconds
        )?;
        if with_gain {
            write!(out, ",{}", opt(r.ladv_gain))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_csv_layout() {
        let rows = vec![
            EpochRecord {
                epoch: 0,
                stage: Stage::Bpr,
                loss: None,
                val_hr: Some(0.5),
                val_ndcg: Some(0.25),
                emb_norm: 1.5,
                seconds: 0.0,
                ladv_gain: None,
            },
            EpochRecord {
                epoch: 1,
                stage: Stage::Apr,
                loss: Some(0.75),
                val_hr: None,
                val_ndcg: None,
                emb_norm: 2.0,
                seconds: 0.125,
                ladv_gain: Some(0.01),
            },
        ];
        let mut buf = Vec::new();
        write_history(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "epoch,stage,loss,val_hr@100,val_ndcg@100,emb_norm,seconds,mean_batch_ladv_gain\n\
             0,bpr,,0.5,0.25,1.5,0,\n\
             1,apr,0.75,,,2,0.125,0.01\n"
        );
        let mut buf = Vec::new();
        write_history(&mut buf, &rows[..1]).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("epoch,stage,loss,val_hr@100,val_ndcg@100,emb_norm,seconds\n"));
    }
}
