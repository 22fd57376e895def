//! Catalogs of per-item modality features, user interaction data, the
//! leave-one-out split and in-batch training batches.

mod batch;
mod io;
mod split;
mod synthetic;

pub use batch::{make_batches, Batch, CutMode};
pub use io::{load_features, load_interactions, save_catalog, save_interactions, CatalogManifest};
pub use split::{sequences_from_interactions, split_leave_one_out, InteractionDataset, UserSplit};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("shape mismatch in {file}: {detail}")]
    ShapeMismatch { file: String, detail: String },
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("item {item} out of range for a catalog of {n_items} items")]
    UnknownItem { item: usize, n_items: usize },
    #[error("user {user} has only {len} interactions after truncation (need at least 3)")]
    SequenceTooShort { user: usize, len: usize },
    #[error("batch size must be at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// One user-item event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: u64,
    pub item_id: usize,
    pub timestamp: u64,
}

/// Fixed-length multi-modal features for every item.
///
/// Visual rows per item: `n_v` patch rows followed by the cls row.
/// Textual rows per item: the cls row followed by `n_t` token rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    pub n_items: usize,
    pub n_v: usize,
    pub n_t: usize,
    pub d_v: usize,
    pub d_t: usize,
    visual: Vec<f64>,
    textual: Vec<f64>,
}

impl Catalog {
    pub fn new(
        n_items: usize,
        (n_v, d_v): (usize, usize),
        (n_t, d_t): (usize, usize),
        visual: Vec<f64>,
        textual: Vec<f64>,
    ) -> Result<Self, DataError> {
        if n_v == 0 || n_t == 0 || d_v == 0 || d_t == 0 {
            return Err(DataError::InvalidSize(format!(
                "feature sizes must be positive (n_v={n_v}, n_t={n_t}, d_v={d_v}, d_t={d_t})"
            )));
        }
        let want_v = n_items * (n_v + 1) * d_v;
        if visual.len() != want_v {
            return Err(DataError::ShapeMismatch {
                file: "visual".into(),
                detail: format!("expected {want_v} values, found {}", visual.len()),
            });
        }
        let want_t = n_items * (n_t + 1) * d_t;
        if textual.len() != want_t {
            return Err(DataError::ShapeMismatch {
                file: "textual".into(),
                detail: format!("expected {want_t} values, found {}", textual.len()),
            });
        }
        Ok(Self {
            n_items,
            n_v,
            n_t,
            d_v,
            d_t,
            visual,
            textual,
        })
    }

    /// `(n_v + 1) × d_v` visual rows of one item, cls last.
    pub fn visual(&self, item: usize) -> &[f64] {
        let w = (self.n_v + 1) * self.d_v;
        &self.visual[item * w..(item + 1) * w]
    }

    /// `(n_t + 1) × d_t` textual rows of one item, cls first.
    pub fn textual(&self, item: usize) -> &[f64] {
        let w = (self.n_t + 1) * self.d_t;
        &self.textual[item * w..(item + 1) * w]
    }

    pub fn visual_cls(&self, item: usize) -> &[f64] {
        &self.visual(item)[self.n_v * self.d_v..]
    }

    pub fn textual_cls(&self, item: usize) -> &[f64] {
        &self.textual(item)[..self.d_t]
    }

    pub fn visual_data(&self) -> &[f64] {
        &self.visual
    }

    pub fn textual_data(&self) -> &[f64] {
        &self.textual
    }
}
