//! End-to-end runs and their artifacts: single runs, the ablation matrix and
//! temperature/ramp sweeps.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{DataConfig, ExperimentConfig, Variant};
use crate::datagen::{
    generate_synthetic, load_features, load_interactions, sequences_from_interactions, split_leave_one_out, Catalog,
    DataError, InteractionDataset,
};
use crate::eval::{MetricsReport, ENSEMBLE};
use crate::losses::LossReport;
use crate::trainer::{test_metrics, train, EpochSummary, TrainError, TrainOutcome};

pub const METRICS_FILE: &str = "metrics.json";
pub const LOSS_FILE: &str = "losscurve.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const POPULARITY_FILE: &str = "popularity.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub struct Dataset {
    pub catalog: Catalog,
    pub interactions: InteractionDataset,
}

/// Loads the catalog directory, or generates synthetic data when none is set.
pub fn prepare_data(cfg: &DataConfig) -> Result<Dataset, DataError> {
    match &cfg.dir {
        Some(dir) => {
            let catalog = load_features(dir)?;
            let events = load_interactions(dir)?;
            let seqs = sequences_from_interactions(&events, catalog.n_items, cfg.min_interactions.max(3))?;
            let interactions = split_leave_one_out(&seqs, catalog.n_items, cfg.max_len)?;
            Ok(Dataset { catalog, interactions })
        }
        None => {
            let s = generate_synthetic(&cfg.synthetic)?;
            Ok(Dataset {
                catalog: s.catalog,
                interactions: s.dataset,
            })
        }
    }
}

pub struct RunOutput {
    pub outcome: TrainOutcome,
    pub test: MetricsReport,
}

impl RunOutput {
    pub fn losses(&self) -> &[LossReport] {
        &self.outcome.losses
    }
}

pub fn run(cfg: &ExperimentConfig, data: &Dataset) -> Result<RunOutput, RunError> {
    let outcome = train(cfg, &data.catalog, &data.interactions)?;
    let test = test_metrics(&outcome, cfg, &data.catalog, &data.interactions)?;
    Ok(RunOutput { outcome, test })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    epoch: usize,
    rows: usize,
    ce_v: f64,
    ce_t: f64,
    ce_id: f64,
    ce_fused: f64,
    kl_v: f64,
    kl_t: f64,
    kl_id: f64,
    w: f64,
    total: f64,
    ce_per_row: f64,
}

#[derive(Serialize)]
struct PopularityRow<'a> {
    group: usize,
    items: usize,
    users: usize,
    stream: &'a str,
    k: usize,
    recall: f64,
    ndcg: f64,
}

pub fn write_metrics(path: &Path, m: &MetricsReport) -> Result<(), RunError> {
    fs::write(path, serde_json::to_string_pretty(m)? + "\n")?;
    Ok(())
}

pub fn write_losses(path: &Path, losses: &[LossReport]) -> Result<(), RunError> {
    let rows: Vec<LossRow> = losses
        .iter()
        .map(|r| LossRow {
            step: r.step,
            epoch: r.epoch,
            rows: r.rows,
            ce_v: r.ce_v,
            ce_t: r.ce_t,
            ce_id: r.ce_id,
            ce_fused: r.ce_fused,
            kl_v: r.kl_v,
            kl_t: r.kl_t,
            kl_id: r.kl_id,
            w: r.w,
            total: r.total,
            ce_per_row: r.ce_per_row(),
        })
        .collect();
    write_csv(path, &rows)
}

/// One row per popularity group, stream and cutoff.
pub fn write_popularity(path: &Path, m: &MetricsReport) -> Result<(), RunError> {
    let mut rows = Vec::new();
    for g in &m.groups {
        for (stream, scores) in &g.metrics {
            for &k in &m.ks {
                rows.push(PopularityRow {
                    group: g.group,
                    items: g.items,
                    users: g.users,
                    stream,
                    k,
                    recall: scores[&format!("recall@{k}")],
                    ndcg: scores[&format!("ndcg@{k}")],
                });
            }
        }
    }
    write_csv(path, &rows)
}

/// Writes every artifact of a run into `dir`; returns the written paths.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<Vec<String>, RunError> {
    fs::create_dir_all(dir)?;
    write_metrics(&dir.join(METRICS_FILE), &out.test)?;
    write_losses(&dir.join(LOSS_FILE), out.losses())?;
    write_csv::<EpochSummary>(&dir.join(EPOCHS_FILE), &out.outcome.epochs)?;
    write_popularity(&dir.join(POPULARITY_FILE), &out.test)?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &out.outcome.store)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    Ok([METRICS_FILE, LOSS_FILE, EPOCHS_FILE, POPULARITY_FILE, CHECKPOINT_FILE, CONFIG_FILE]
        .iter()
        .map(|f| dir.join(f).display().to_string())
        .collect())
}

/// One ablation-table row: ensemble metrics at every cutoff.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub report: MetricsReport,
}

/// Trains every variant on the same data and seed.
pub fn run_ablation(
    base: &ExperimentConfig,
    data: &Dataset,
    variants: &[Variant],
    mut on_done: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>, RunError> {
    let mut rows = Vec::new();
    for &v in variants {
        log::info!("ablation: {}", v.label());
        let cfg = v.apply(base);
        let out = run(&cfg, data)?;
        let row = AblationRow {
            label: v.label().to_string(),
            report: out.test,
        };
        on_done(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Table layout: one row per variant, `recall@k` and `ndcg@k` columns of
/// the ensemble stream.
pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path)?;
    let ks = rows.first().map(|r| r.report.ks.clone()).unwrap_or_default();
    let mut header = vec!["variant".to_string()];
    for k in &ks {
        header.push(format!("recall@{k}"));
        header.push(format!("ndcg@{k}"));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.label.clone()];
        for &k in &ks {
            rec.push(format!("{:.6}", r.report.get(ENSEMBLE, "recall", k)));
            rec.push(format!("{:.6}", r.report.get(ENSEMBLE, "ndcg", k)));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    #[serde(rename = "T")]
    pub temperature: f64,
    pub alpha: f64,
    pub fst_layers: usize,
    #[serde(rename = "recall@10")]
    pub recall_at_10: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg_at_10: f64,
}

pub const SWEEP_T: [f64; 6] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
pub const SWEEP_ALPHA: [f64; 6] = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0];

/// Axes of a sweep; every combination is one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub temperatures: Vec<f64>,
    pub alphas: Vec<f64>,
    pub fst_layers: Vec<usize>,
}

impl SweepGrid {
    pub fn standard(base: &ExperimentConfig) -> Self {
        Self {
            temperatures: SWEEP_T.to_vec(),
            alphas: SWEEP_ALPHA.to_vec(),
            fst_layers: vec![base.model.fst_layers],
        }
    }

    pub fn cells(&self) -> Vec<(f64, f64, usize)> {
        let mut out = Vec::new();
        for &l in &self.fst_layers {
            for &t in &self.temperatures {
                for &a in &self.alphas {
                    out.push((t, a, l));
                }
            }
        }
        out
    }

    pub fn config(base: &ExperimentConfig, (t, a, l): (f64, f64, usize)) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.distill.temperature = t;
        cfg.distill.alpha = a;
        cfg.model.fst_layers = l;
        if !cfg.eval.ks.contains(&10) {
            cfg.eval.ks.push(10);
        }
        cfg
    }
}

/// Metrics are ensemble test scores at cutoff 10.
pub fn run_sweep(
    base: &ExperimentConfig,
    data: &Dataset,
    grid: &SweepGrid,
    mut on_done: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>, RunError> {
    let mut rows = Vec::new();
    for cell in grid.cells() {
        let cfg = SweepGrid::config(base, cell);
        log::info!("sweep: T={} alpha={} fst_layers={}", cell.0, cell.1, cell.2);
        let out = run(&cfg, data)?;
        let row = SweepRow {
            temperature: cell.0,
            alpha: cell.1,
            fst_layers: cell.2,
            recall_at_10: out.test.get(ENSEMBLE, "recall", 10),
            ndcg_at_10: out.test.get(ENSEMBLE, "ndcg", 10),
        };
        on_done(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<(), RunError> {
    write_csv(path, rows)
}
