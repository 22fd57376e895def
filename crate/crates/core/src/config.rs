//! Experiment configuration: a TOML file with `[data]`, `[model]`, `[train]`,
//! `[distill]` and `[eval]` sections, overridable with dotted `key=value`
//! assignments.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::branches::Branch;
use crate::datagen::{CutMode, SyntheticConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid override `{0}`: expected key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Feature semantic transformation applied to raw item features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FstKind {
    /// Joint Transformer over `[visual; id; text]`.
    #[default]
    Imt,
    /// One Transformer stack per modality; the ID branch skips them.
    Separate,
    /// Projected cls rows straight into the heads.
    Dnn,
    /// No content path: the ID table is the item embedding.
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdInit {
    #[default]
    AvgModal,
    Text,
    Image,
    Random,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// One tower and one CE per branch, plus distillation.
    #[default]
    Collaborative,
    /// Mean of the branch item embeddings into a single tower.
    Early,
    /// One tower per branch, one CE on the mean of the branch logits.
    Late,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    #[default]
    SelfAttention,
    Recurrent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Catalog directory; when unset, data is generated from `synthetic`.
    pub dir: Option<PathBuf>,
    /// Filtering and truncation for `dir` data; synthetic data uses the
    /// generator's own settings.
    pub min_interactions: usize,
    pub max_len: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            min_interactions: 5,
            max_len: 15,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub fst: FstKind,
    pub fst_layers: usize,
    pub id_mask: bool,
    pub id_init: IdInit,
    pub id_init_std: f64,
    pub branches: Vec<Branch>,
    pub fusion: Fusion,
    pub backbone: Backbone,
    pub seq_layers: usize,
    pub seq_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 2,
            ffn_mult: 4,
            dropout: 0.1,
            fst: FstKind::Imt,
            fst_layers: 2,
            id_mask: true,
            id_init: IdInit::AvgModal,
            id_init_std: 0.1,
            branches: Branch::ALL.to_vec(),
            fusion: Fusion::Collaborative,
            backbone: Backbone::SelfAttention,
            seq_layers: 2,
            seq_heads: 2,
        }
    }
}

impl ModelConfig {
    pub fn has(&self, b: Branch) -> bool {
        self.branches.contains(&b)
    }

    /// Branches in canonical `v, t, id` order.
    pub fn branch_list(&self) -> Vec<Branch> {
        Branch::ALL.into_iter().filter(|b| self.has(*b)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub cut: CutMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 128,
            epochs: 30,
            patience: 5,
            seed: 7,
            cut: CutMode::Last,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub enabled: bool,
    #[serde(rename = "T")]
    pub temperature: f64,
    pub alpha: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            temperature: 0.5,
            alpha: 20.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub groups: usize,
    /// Cutoff used for model selection; must appear in `ks`.
    pub select_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![5, 10, 20],
            groups: 8,
            select_k: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `section.key=value` assignments. Values are read as TOML
    /// literals, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut root = toml::Value::try_from(self).expect("config serializes");
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| ConfigError::Override(raw.to_string()))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Override(raw.to_string()));
            }
            let value = parse_literal(value.trim());
            set_path(&mut root, key, value)?;
        }
        let cfg: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let m = &self.model;
        if m.d == 0 || m.heads == 0 || !m.d.is_multiple_of(m.heads) || !m.d.is_multiple_of(m.seq_heads.max(1)) {
            return bad(format!(
                "model.d ({}) must be positive and divisible by model.heads ({}) and model.seq_heads ({})",
                m.d, m.heads, m.seq_heads
            ));
        }
        if m.seq_heads == 0 || m.ffn_mult == 0 {
            return bad("model.seq_heads and model.ffn_mult must be positive".into());
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return bad(format!("model.dropout must lie in [0, 1), got {}", m.dropout));
        }
        if m.branches.is_empty() {
            return bad("model.branches must name at least one of v, t, id".into());
        }
        let mut sorted = m.branches.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != m.branches.len() {
            return bad("model.branches contains duplicates".into());
        }
        match m.fst {
            FstKind::None => {
                if m.branches != [Branch::Id] {
                    return bad("model.fst = \"none\" requires model.branches = [\"id\"]".into());
                }
            }
            FstKind::Imt | FstKind::Separate => {
                if !(1..=4).contains(&m.fst_layers) {
                    return bad(format!("model.fst_layers must lie in 1..=4, got {}", m.fst_layers));
                }
            }
            FstKind::Dnn => {}
        }
        if m.fst != FstKind::None && !(m.has(Branch::Visual) || m.has(Branch::Textual)) {
            return bad("content FST variants need a v or t branch; use model.fst = \"none\"".into());
        }
        if m.fst == FstKind::Imt && m.has(Branch::Visual) != m.has(Branch::Textual) {
            return bad("the joint Transformer needs both v and t branches".into());
        }
        if m.id_init_std <= 0.0 {
            return bad("model.id_init_std must be positive".into());
        }
        let t = &self.train;
        if t.lr <= 0.0 || !t.lr.is_finite() {
            return bad(format!("train.lr must be positive, got {}", t.lr));
        }
        if t.batch_size < 2 {
            return bad(format!("train.batch_size must be at least 2, got {}", t.batch_size));
        }
        if self.distill.temperature <= 0.0 {
            return bad(format!("distill.T must be positive, got {}", self.distill.temperature));
        }
        if self.distill.alpha < 1.0 {
            return bad(format!("distill.alpha must be at least 1, got {}", self.distill.alpha));
        }
        let e = &self.eval;
        if e.ks.is_empty() || e.ks.contains(&0) {
            return bad("eval.ks must be a nonempty list of positive cutoffs".into());
        }
        if !e.ks.contains(&e.select_k) {
            return bad(format!("eval.select_k ({}) must appear in eval.ks", e.select_k));
        }
        if e.groups < 2 {
            return bad(format!("eval.groups must be at least 2, got {}", e.groups));
        }
        if self.data.max_len == 0 {
            return bad("data.max_len must be positive".into());
        }
        Ok(())
    }
}

fn parse_literal(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| {
            ConfigError::Parse(format!("`{}` is not a section", parts[..i].join(".")))
        })?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!("split yields at least one part")
}

/// Named variants of the ablation matrix, applied on top of a base config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    TextInit,
    ImageInit,
    RandomInit,
    NoIdMask,
    SeparateFst2,
    SeparateFst1,
    NoDistillation,
    NoId,
    IdOnly,
    LateFusion,
    EarlyFusion,
}

impl Variant {
    /// The eight ablation rows followed by the full model.
    pub const ABLATION: [Variant; 9] = [
        Variant::TextInit,
        Variant::ImageInit,
        Variant::RandomInit,
        Variant::NoIdMask,
        Variant::SeparateFst2,
        Variant::SeparateFst1,
        Variant::NoDistillation,
        Variant::NoId,
        Variant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "ODMT",
            Variant::TextInit => "(1) Text Initialization",
            Variant::ImageInit => "(2) Image Initialization",
            Variant::RandomInit => "(3) w/o Initialization",
            Variant::NoIdMask => "(4) w/o ID Mask",
            Variant::SeparateFst2 => "(5) w/o IMT (1)",
            Variant::SeparateFst1 => "(6) w/o IMT (2)",
            Variant::NoDistillation => "(7) w/o Online Distillation",
            Variant::NoId => "(8) w/o ID",
            Variant::IdOnly => "SASRec (ID only)",
            Variant::LateFusion => "SASRec+LF",
            Variant::EarlyFusion => "SASRec+EF",
        }
    }

    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        let m = &mut c.model;
        match self {
            Variant::Full => {}
            Variant::TextInit => m.id_init = IdInit::Text,
            Variant::ImageInit => m.id_init = IdInit::Image,
            Variant::RandomInit => m.id_init = IdInit::Random,
            Variant::NoIdMask => m.id_mask = false,
            Variant::SeparateFst2 => {
                m.fst = FstKind::Separate;
                m.fst_layers = 2;
            }
            Variant::SeparateFst1 => {
                m.fst = FstKind::Separate;
                m.fst_layers = 1;
            }
            Variant::NoDistillation => {
                m.fusion = Fusion::Late;
                c.distill.enabled = false;
            }
            Variant::NoId => m.branches = vec![Branch::Visual, Branch::Textual],
            Variant::IdOnly => {
                m.fst = FstKind::None;
                m.branches = vec![Branch::Id];
                m.id_init = IdInit::Random;
                c.distill.enabled = false;
            }
            Variant::LateFusion => {
                m.fst = FstKind::Separate;
                m.fst_layers = 2;
                m.fusion = Fusion::Late;
                c.distill.enabled = false;
            }
            Variant::EarlyFusion => {
                m.fst = FstKind::Separate;
                m.fst_layers = 2;
                m.fusion = Fusion::Early;
                c.distill.enabled = false;
            }
        }
        c
    }
}
