//! The training loop with per-epoch validation and early stopping.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Fusion};
use crate::datagen::{make_batches, Catalog, DataError, InteractionDataset};
use crate::eval::{evaluate, EvalError, MetricsReport, Split, ENSEMBLE};
use crate::item_tower::TowerError;
use crate::losses::{ramp_weight, LossError, LossReport};
use crate::model::Model;
use crate::nn::Ctx;
use crate::numerics::{Adam, AdamConfig, NumericsError, ParamStore, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tower(#[from] TowerError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("training diverged at step {step} (epoch {epoch}): {detail}")]
    Diverged {
        step: usize,
        epoch: usize,
        detail: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub w: f64,
    pub mean_ce_per_row: f64,
    pub val_recall: f64,
    pub val_ndcg: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    /// Parameters of the best validation epoch (initial ones when no epoch ran).
    pub store: ParamStore,
    pub losses: Vec<LossReport>,
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: Option<usize>,
}

fn snapshot(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, p)| p.value.clone()).collect()
}

fn restore(store: &mut ParamStore, values: Vec<Tensor>) {
    for (p, v) in store.iter_mut().zip(values) {
        p.value = v;
    }
}

/// Dropout stream for one step, independent of the shuffling stream.
fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0xD134_2543_DE82_EF95) ^ (step as u64).wrapping_add(0x2545_F491_4F6C_DD1D)
}

pub fn train(cfg: &ExperimentConfig, catalog: &Catalog, dataset: &InteractionDataset) -> Result<TrainOutcome, TrainError> {
    let tc = &cfg.train;
    let (model, mut store) = Model::new(&cfg.model, catalog, dataset.max_len, tc.seed)?;
    log::info!(
        "model: {} parameter tensors, {} scalars",
        store.len(),
        store.num_scalars()
    );
    let mut adam = Adam::new(AdamConfig {
        lr: tc.lr,
        ..Default::default()
    })?;
    let distill = cfg.distill.enabled && cfg.model.fusion == Fusion::Collaborative;
    let select_k = cfg.eval.select_k;
    let mut losses = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut step = 0;
    for epoch in 0..tc.epochs {
        let started = Instant::now();
        let w = ramp_weight(epoch as i64, cfg.distill.alpha)?;
        let batches = make_batches(dataset, tc.batch_size, tc.seed, epoch, tc.cut)?;
        let (mut ce_rows, mut rows) = (0.0, 0);
        for batch in &batches {
            let mut ctx = Ctx::train(&store, cfg.model.dropout, step_seed(tc.seed, step));
            let fwd = model.batch_forward(&mut ctx, catalog, batch, &dataset.pop)?;
            let (loss, mut report) = model.loss(&mut ctx, &fwd, distill.then_some((cfg.distill.temperature, w)))?;
            report.step = step;
            report.epoch = epoch;
            if !report.total.is_finite() {
                log::error!("non-finite loss at step {step}: {report:?}");
                return Err(TrainError::Diverged {
                    step,
                    epoch,
                    detail: format!("loss {}", report.total),
                });
            }
            let grads = ctx.g.backward(loss).map_err(|e| {
                log::error!("backward failed at step {step}: {e}");
                TrainError::Diverged {
                    step,
                    epoch,
                    detail: e.to_string(),
                }
            })?;
            drop(ctx);
            store.accumulate(&grads);
            adam.step(&mut store);
            ce_rows += report.ce_sum();
            rows += report.rows;
            losses.push(report);
            step += 1;
        }
        let val = evaluate(&model, &store, catalog, dataset, Split::Validation, &cfg.eval)?;
        let recall = val.get(ENSEMBLE, "recall", select_k);
        let summary = EpochSummary {
            epoch,
            w,
            mean_ce_per_row: ce_rows / rows.max(1) as f64,
            val_recall: recall,
            val_ndcg: val.get(ENSEMBLE, "ndcg", select_k),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: ce/row {:.4}, w {:.3}, val recall@{select_k} {:.4}, {:.1}s",
            summary.mean_ce_per_row,
            w,
            recall,
            summary.seconds
        );
        epochs.push(summary);
        if best.as_ref().is_none_or(|(r, _, _)| recall > *r) {
            best = Some((recall, epoch, snapshot(&store)));
        } else if best.as_ref().is_some_and(|(_, e, _)| epoch - e >= tc.patience) {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, values)) = best {
        restore(&mut store, values);
    }
    Ok(TrainOutcome {
        model,
        store,
        losses,
        epochs,
        best_epoch,
    })
}

/// Test metrics of a trained model.
pub fn test_metrics(outcome: &TrainOutcome, cfg: &ExperimentConfig, catalog: &Catalog, dataset: &InteractionDataset) -> Result<MetricsReport, TrainError> {
    Ok(evaluate(&outcome.model, &outcome.store, catalog, dataset, Split::Test, &cfg.eval)?)
}
