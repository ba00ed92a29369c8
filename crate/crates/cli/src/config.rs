//! Run configuration: JSON file, `--set` overrides, then the seed variable.

use std::path::{Path, PathBuf};

use attnembed_core::data::{SeriesKind, SplitSpec, SyntheticParams};
use attnembed_core::embed::EmbedMode;
use attnembed_core::model::ModelConfig;
use attnembed_core::theory::{AnchorPolicy, ClusterSpec, MIN_TRIALS};
use attnembed_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "ATTNEMBED_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySection {
    pub trials: usize,
    /// `null` means `1 / sqrt(d)`.
    pub lambda: Option<f64>,
    pub anchors: AnchorPolicy,
}

impl Default for TheorySection {
    fn default() -> Self {
        TheorySection {
            trials: 200,
            lambda: None,
            anchors: AnchorPolicy::ExcludePair,
        }
    }
}

/// Grid axes; empty axes stay at the model config's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanSection {
    pub ema_alpha: Vec<f64>,
    pub window_size: Vec<usize>,
    /// Sets both the landmark kernel and stride.
    pub landmark_stride: Vec<usize>,
    pub embed_layers: Vec<usize>,
}

impl Default for ScanSection {
    fn default() -> Self {
        ScanSection {
            ema_alpha: vec![0.3, 0.5, 0.7, 0.9],
            window_size: Vec::new(),
            landmark_stride: Vec::new(),
            embed_layers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankSection {
    pub depths: Vec<usize>,
    /// Profile best-validation weights instead of fresh initializations.
    pub trained: bool,
    /// Test lookbacks averaged per profile.
    pub batch: usize,
}

impl Default for RankSection {
    fn default() -> Self {
        RankSection {
            depths: vec![3, 6],
            trained: false,
            batch: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub model: ModelConfig,
    pub modes: Vec<EmbedMode>,
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            model: ModelConfig::tiny(),
            modes: vec![EmbedMode::Softmax, EmbedMode::Rbf, EmbedMode::Poly],
            samples: 2,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    /// Copied into every sub-config seed after overrides.
    pub seed: u64,
    /// CSV input; the synthetic series is used when absent.
    pub dataset: Option<PathBuf>,
    pub series: SeriesKind,
    pub synthetic: SyntheticParams,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Seeds `seed, seed + 1, ...` for `compare` and `ablate`.
    pub repeats: usize,
    /// Model file read by `eval`.
    pub checkpoint: Option<PathBuf>,
    pub cluster: ClusterSpec,
    pub theory: TheorySection,
    pub scan: ScanSection,
    pub rank: RankSection,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            experiment: "attnembed".into(),
            seed: 2024,
            dataset: None,
            series: SeriesKind::F2,
            synthetic: SyntheticParams::default(),
            split: SplitSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            repeats: 3,
            checkpoint: None,
            cluster: ClusterSpec::default(),
            theory: TheorySection::default(),
            scan: ScanSection::default(),
            rank: RankSection::default(),
            gradcheck: GradcheckSection::default(),
        };
        cfg.propagate_seed();
        cfg
    }
}

fn field_error(prefix: &str, e: attnembed_core::Error) -> CliError {
    match e {
        attnembed_core::Error::Config { field, reason } => {
            CliError::Config(format!("invalid field `{prefix}{field}`: {reason}"))
        }
        attnembed_core::Error::Argument(reason) => CliError::Config(format!("invalid `{prefix}`: {reason}")),
        other => other.into(),
    }
}

impl RunConfig {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|i| self.seed + i).collect()
    }

    fn propagate_seed(&mut self) {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.synthetic.seed = self.seed;
        self.cluster.seed = self.seed;
        self.gradcheck.model.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        for (prefix, model) in [("model.", &self.model), ("gradcheck.model.", &self.gradcheck.model)] {
            model.embed.validate().map_err(|e| field_error(&format!("{prefix}embed."), e))?;
            model.validate().map_err(|e| field_error(prefix, e))?;
        }
        self.train.validate().map_err(|e| field_error("train.", e))?;
        self.synthetic.validate().map_err(|e| field_error("synthetic.", e))?;
        self.cluster.validate().map_err(|e| field_error("cluster", e))?;
        let bad = |field: &str, reason: &str| Err(CliError::Config(format!("invalid field `{field}`: {reason}")));
        if self.repeats == 0 {
            return bad("repeats", "must be at least 1");
        }
        if self.theory.trials < MIN_TRIALS {
            return bad("theory.trials", &format!("must be at least {MIN_TRIALS}"));
        }
        if matches!(self.theory.lambda, Some(l) if !(l > 0.0 && l.is_finite())) {
            return bad("theory.lambda", "must be positive");
        }
        if let Some(a) = self.scan.ema_alpha.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return bad("scan.ema_alpha", &format!("{a} outside (0, 1]"));
        }
        if self.rank.depths.is_empty() || self.rank.depths.contains(&0) {
            return bad("rank.depths", "need at least one depth, each at least 1");
        }
        if self.rank.batch == 0 {
            return bad("rank.batch", "must be at least 1");
        }
        if self.gradcheck.samples == 0 {
            return bad("gradcheck.samples", "must be at least 1");
        }
        if !(self.gradcheck.step > 0.0) {
            return bad("gradcheck.step", "must be positive");
        }
        Ok(())
    }
}

/// Set `dotted.key` in a JSON object tree. The value is parsed as JSON and
/// falls back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one part")
}

/// Parse a resolved config from a JSON tree.
pub fn from_value(value: Value) -> Result<RunConfig> {
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}

/// File (or `{}`), then overrides in order, then `seed_override`.
pub fn load_config(path: Option<&Path>, overrides: &[String], seed_override: Option<&str>) -> Result<RunConfig> {
    let mut tree = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if !tree.is_object() {
        return Err(CliError::Config("top level must be a JSON object".into()));
    }
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    if let Some(raw) = seed_override {
        let seed: u64 = raw
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
        tree["seed"] = seed.into();
    }
    let mut cfg = from_value(tree)?;
    cfg.propagate_seed();
    cfg.validate()?;
    Ok(cfg)
}
