//! Run configuration, read from a single TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synthetic::{SyntheticConfig, ATTRS};
use crate::averaging::GateConfig;
use crate::choice::SpecConfig;
use crate::data::{Schema, SplitConfig};
use crate::dft::DftConfig;
use crate::error::{Error, Result};
use crate::ml::{GbtConfig, MlpConfig};
use crate::optim::OptimConfig;

pub const MODEL_NAMES: [&str; 5] = ["mnl", "nl", "dft", "mlp", "gbt"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Delimited input for `source = "file"`, relative to the config file.
    pub path: Option<PathBuf>,
    pub schema: Schema,
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MnlConfig {
    pub spec: SpecConfig,
    pub optim: OptimConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NlConfig {
    pub spec: SpecConfig,
    /// Nest groups by alternative name; must partition the alternatives.
    pub nests: Vec<Vec<String>>,
    pub optim: OptimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub weight_curve_points: usize,
    pub svg: bool,
    /// Models counted as structural in the weight summaries.
    pub structural_models: Vec<String>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            weight_curve_points: 200,
            svg: true,
            structural_models: vec!["mnl".into(), "nl".into(), "dft".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub name: String,
    /// Root seed; every random stream is derived from it by name.
    pub seed: u64,
    /// Sub-models to fit and average, in panel order.
    pub models: Vec<String>,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub mnl: MnlConfig,
    pub nl: NlConfig,
    pub dft: DftConfig,
    pub mlp: MlpConfig,
    pub gbt: GbtConfig,
    pub gate: GateConfig,
    pub report: ReportConfig,
}

/// Linear and log terms for every synthetic attribute, socio-economic
/// shifts on car.
fn synthetic_spec() -> SpecConfig {
    let attrs: Vec<String> = ATTRS.iter().map(|a| a.to_string()).collect();
    SpecConfig {
        linear_attrs: Some(attrs.clone()),
        log_attrs: Some(attrs),
        socio_alts: vec!["car".into()],
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "regime-switch-v1".into(),
            seed: 7,
            models: vec!["nl".into(), "dft".into(), "mlp".into(), "gbt".into()],
            data: DataConfig::default(),
            split: SplitConfig::default(),
            mnl: MnlConfig {
                spec: synthetic_spec(),
                ..MnlConfig::default()
            },
            nl: NlConfig {
                spec: synthetic_spec(),
                nests: vec![vec!["walk".into(), "cycle".into()], vec!["pt".into(), "car".into()]],
                ..NlConfig::default()
            },
            dft: DftConfig {
                spec: synthetic_spec(),
                ..DftConfig::default()
            },
            mlp: MlpConfig::default(),
            gbt: GbtConfig::default(),
            gate: GateConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative data path is resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(p), Some(dir)) = (cfg.data.path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("`models` must name at least one sub-model".into()));
        }
        for (i, m) in self.models.iter().enumerate() {
            if !MODEL_NAMES.contains(&m.as_str()) {
                return Err(Error::Config(format!(
                    "unknown model `{m}` (expected one of {})",
                    MODEL_NAMES.join(", ")
                )));
            }
            if self.models[..i].contains(m) {
                return Err(Error::Config(format!("model `{m}` listed twice")));
            }
        }
        if self.data.source == DataSource::File && self.data.path.is_none() {
            return Err(Error::Config("data.source = \"file\" needs data.path".into()));
        }
        if self.split.segments != 10 {
            return Err(Error::Config("split.segments must be 10".into()));
        }
        if !(0.0..1.0).contains(&self.split.holdout_frac) {
            return Err(Error::Config("split.holdout_frac must be in [0, 1)".into()));
        }
        if self.dft.tau == 0 || self.dft.draws == 0 {
            return Err(Error::Config("dft.tau and dft.draws must be positive".into()));
        }
        self.mlp.validate()?;
        self.gbt.validate()?;
        self.gate.validate()?;
        if self.data.source == DataSource::Synthetic {
            self.data.synthetic.validate()?;
        }
        Ok(())
    }

    /// Seed for a named stage, derived from the root seed.
    pub fn stage_seed(&self, name: &str) -> u64 {
        crate::seed::derive(self.seed, name, 0)
    }

    pub fn split_seed(&self) -> u64 {
        self.split.seed.unwrap_or_else(|| self.stage_seed("split"))
    }
}
