//! Catalog directory layout:
//!
//! - `manifest.json`: `{"n_items", "n_v", "n_t", "d_v", "d_t"}`
//! - `visual.f64`: little-endian `f64`, items contiguous, `(n_v + 1) × d_v` each
//! - `textual.f64`: little-endian `f64`, items contiguous, `(n_t + 1) × d_t` each
//! - `interactions.csv`: `user_id,item_id,timestamp`, ascending per user

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Catalog, DataError, Interaction};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VISUAL_FILE: &str = "visual.f64";
pub const TEXTUAL_FILE: &str = "textual.f64";
pub const INTERACTIONS_FILE: &str = "interactions.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogManifest {
    pub n_items: usize,
    pub n_v: usize,
    pub n_t: usize,
    pub d_v: usize,
    pub d_t: usize,
}

pub fn save_catalog(dir: &Path, catalog: &Catalog) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let manifest = CatalogManifest {
        n_items: catalog.n_items,
        n_v: catalog.n_v,
        n_t: catalog.n_t,
        d_v: catalog.d_v,
        d_t: catalog.d_t,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    write_f64(&dir.join(VISUAL_FILE), catalog.visual_data())?;
    write_f64(&dir.join(TEXTUAL_FILE), catalog.textual_data())?;
    Ok(())
}

fn write_f64(path: &Path, values: &[f64]) -> Result<(), DataError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_f64(path: &Path, rows: usize, width: usize) -> Result<Vec<f64>, DataError> {
    let bytes = read_required(path)?;
    let name = path.file_name().unwrap_or_default().to_string_lossy().to_string();
    if bytes.len() % 8 != 0 {
        return Err(DataError::ShapeMismatch {
            file: name,
            detail: format!("{} bytes is not a whole number of f64 values", bytes.len()),
        });
    }
    let found = bytes.len() / 8;
    if found != rows * width {
        let detail = if rows > 0 && found % rows == 0 {
            format!(
                "manifest implies {width} values per item, file holds {} per item",
                found / rows
            )
        } else {
            format!("expected {} values, found {found}", rows * width)
        };
        return Err(DataError::ShapeMismatch { file: name, detail });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_required(path: &Path) -> Result<Vec<u8>, DataError> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(DataError::MissingFile(path.display().to_string()))
        }
        Err(e) => Err(e.into()),
    }
}

/// Loads and validates the feature files of a catalog directory.
pub fn load_features(dir: &Path) -> Result<Catalog, DataError> {
    let manifest: CatalogManifest = serde_json::from_slice(&read_required(&dir.join(MANIFEST_FILE))?)?;
    let visual = read_f64(
        &dir.join(VISUAL_FILE),
        manifest.n_items,
        (manifest.n_v + 1) * manifest.d_v,
    )?;
    let textual = read_f64(
        &dir.join(TEXTUAL_FILE),
        manifest.n_items,
        (manifest.n_t + 1) * manifest.d_t,
    )?;
    Catalog::new(
        manifest.n_items,
        (manifest.n_v, manifest.d_v),
        (manifest.n_t, manifest.d_t),
        visual,
        textual,
    )
}

pub fn save_interactions(dir: &Path, interactions: &[Interaction]) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(INTERACTIONS_FILE))?;
    for ev in interactions {
        w.serialize(ev)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_interactions(dir: &Path) -> Result<Vec<Interaction>, DataError> {
    let path = dir.join(INTERACTIONS_FILE);
    if !path.exists() {
        return Err(DataError::MissingFile(path.display().to_string()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
