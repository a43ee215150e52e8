//! The run description: one JSON document, with `--set a.b.c=value`
//! overrides applied to the parsed document before it is typed.

use std::path::{Path, PathBuf};

use adet_core::dataset::Layout;
use adet_core::encoder::{EncoderConfig, Pooling};
use adet_core::head::HeadConfig;
use adet_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives the dataset split, encoder initialization, head
    /// initialization and mini-batch order.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub encoder: EncoderSection,
    pub head: HeadSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
    /// Embedding set read by `train` and `eval`; defaults to
    /// `<output_dir>/embeddings.kair`.
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub root: Option<PathBuf>,
    pub layout: Layout,
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    /// Defaults to `<output_dir>/encoder.kair`.
    pub container: Option<PathBuf>,
    /// Named config (`tiny-test`, `mobilesam-v1`). The container's stored
    /// config must match it.
    pub config: String,
    pub pooling: Pooling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadProfile {
    /// One hidden layer of width `d`.
    Mvtec,
    /// Hidden layers `d`, `d/2`.
    Visa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    pub profile: HeadProfile,
    /// Explicit hidden widths; overrides `profile` when set.
    pub hidden_dims: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub class_weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub warmup: usize,
    pub iterations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("adet-out"),
            dataset: DatasetSection::default(),
            encoder: EncoderSection::default(),
            head: HeadSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
            embeddings: None,
        }
    }
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            root: None,
            layout: Layout::Mvtec,
            train_fraction: 0.6,
        }
    }
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            container: None,
            config: "tiny-test".into(),
            pooling: Pooling::Mean,
        }
    }
}

impl Default for HeadSection {
    fn default() -> Self {
        Self {
            profile: HeadProfile::Mvtec,
            hidden_dims: None,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            class_weight: None,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            threshold: adet_core::metrics::DEFAULT_THRESHOLD,
        }
    }
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            warmup: 10,
            iterations: 100,
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `overrides` in
    /// order, then `out` if given, and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String], out: Option<&Path>) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(Self::default()).expect("default config serializes"),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: Self =
            serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(out) = out {
            cfg.output_dir = out.to_path_buf();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.dataset.train_fraction > 0.0 && self.dataset.train_fraction < 1.0) {
            return bad(format!(
                "dataset.train_fraction must be in (0, 1), got {}",
                self.dataset.train_fraction
            ));
        }
        self.encoder_config()?;
        if let Some(dims) = &self.head.hidden_dims {
            if dims.contains(&0) {
                return bad("head.hidden_dims entries must be positive".into());
            }
        }
        self.train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return bad(format!(
                "eval.threshold must be in [0, 1], got {}",
                self.eval.threshold
            ));
        }
        if self.bench.iterations == 0 {
            return bad("bench.iterations must be at least 1".into());
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        EncoderConfig::named(&self.encoder.config).ok_or_else(|| {
            CliError::Config(format!(
                "unknown encoder.config `{}` (expected tiny-test or mobilesam-v1)",
                self.encoder.config
            ))
        })
    }

    pub fn head_config(&self, input_dim: usize) -> HeadConfig {
        match (&self.head.hidden_dims, self.head.profile) {
            (Some(dims), _) => HeadConfig {
                input_dim,
                hidden_dims: dims.clone(),
            },
            (None, HeadProfile::Mvtec) => HeadConfig::mvtec(input_dim),
            (None, HeadProfile::Visa) => HeadConfig::visa(input_dim),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            seed: self.seed,
            class_weight_override: t.class_weight,
        }
    }

    pub fn encoder_path(&self) -> PathBuf {
        self.encoder
            .container
            .clone()
            .unwrap_or_else(|| self.output_dir.join("encoder.kair"))
    }

    pub fn embeddings_path(&self) -> PathBuf {
        self.embeddings
            .clone()
            .unwrap_or_else(|| self.output_dir.join("embeddings.kair"))
    }

    pub fn head_path(&self) -> PathBuf {
        self.output_dir.join("head.kair")
    }
}

/// `a.b.c=value`: `value` is parsed as JSON, falling back to a plain
/// string, and stored at that path. Intermediate objects are created.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{spec}`")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("--set: bad key `{path}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let mut keys = path.split('.').peekable();
    while let Some(key) = keys.next() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(CliError::Config(format!(
                    "--set {path}: `{key}` is inside a non-object"
                )));
            }
        }
        let map = node.as_object_mut().expect("checked above");
        if keys.peek().is_none() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map.entry(key.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one key")
}
