//! The single JSON document describing a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ColumnSpec, SinusoidConfig, SplitRatios, SyntheticConfig};
use crate::error::{Error, Result};
use crate::pipeline::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticConfig),
    Sinusoid(SinusoidConfig),
    Csv {
        path: PathBuf,
        /// `None` takes every non-time column.
        #[serde(default)]
        columns: Option<Vec<String>>,
        #[serde(default)]
        split: SplitRatios,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticConfig::default())
    }
}

impl DatasetConfig {
    pub fn column_spec(&self) -> ColumnSpec {
        match self {
            DatasetConfig::Csv {
                columns: Some(c), ..
            } => ColumnSpec::Named(c.clone()),
            _ => ColumnSpec::All,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Test-window indices dumped as stage traces.
    pub trace_windows: Vec<usize>,
    /// Multiplier applied to reported metrics only.
    pub scale_factor: Option<f64>,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trace_windows: vec![0],
            scale_factor: None,
            batch_size: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Standardize with training-region statistics before windowing.
    pub zscore: bool,
    pub stride: usize,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            zscore: true,
            stride: 1,
            out_dir: PathBuf::from("out"),
            seeds: vec![1],
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Content hash of everything that influences a run with `seed`.
    pub fn content_hash(&self, seed: u64) -> Result<String> {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.train.seed = seed;
        c.out_dir = PathBuf::new();
        Ok(crate::hash::sha256_hex(serde_json::to_string(&c)?.as_bytes()))
    }

    /// Pre-flight checks shared by every command.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if self.model.lookback == 0 || self.model.horizon == 0 {
            return Err(Error::Config("lookback and horizon must be positive".into()));
        }
        if matches!(self.eval.scale_factor, Some(s) if !(s.is_finite() && s > 0.0)) {
            return Err(Error::Config("scale_factor must be a positive number".into()));
        }
        self.model.flow.validate()?;
        self.train.validate()?;
        self.model.variant.resolve_mode(self.train.mode)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Variant;
    use crate::training::TrainMode;

    #[test]
    fn defaults_roundtrip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = RunConfig::from_json(r#"{"model": {"variant": "revin"}, "seeds": [1, 2]}"#).unwrap();
        assert_eq!(c.model.variant, Variant::Revin);
        assert_eq!(c.model.lookback, 48);
        assert_eq!(c.seeds, vec![1, 2]);
        assert!(RunConfig::from_json(r#"{"modle": {}}"#).is_err());
    }

    #[test]
    fn inconsistent_mode_fails_preflight() {
        let mut c = RunConfig::default();
        c.model.variant = Variant::InflowJ;
        c.train.mode = Some(TrainMode::Bilevel);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.train.mode = None;
        c.validate().unwrap();
    }

    #[test]
    fn hash_ignores_output_dir_but_not_seed() {
        let a = RunConfig::default();
        let b = RunConfig {
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.content_hash(1).unwrap(), b.content_hash(1).unwrap());
        assert_ne!(a.content_hash(1).unwrap(), a.content_hash(2).unwrap());
    }
}
