//! Experiment configuration (TOML).
//!
//! One file carries the rig, data source, architecture, training and
//! evaluation settings. Without `data.frames_dir` the synthetic scene
//! described by `[synth]` is used as the dataset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ingest, synthesize, SequenceStore, SplitConfig, SynthConfig, DEFAULT_BACKGROUND_DECAY};
use crate::error::{Error, Result};
use crate::eval::{Gating, DEFAULT_GAPS};
use crate::model::{DiscriminatorSpec, GeneratorSpec};
use crate::training::{ModelConfig, TrainConfig};
use crate::types::CameraRig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Directory holding `cam<id>/` frame folders; relative to the config file.
    pub frames_dir: Option<PathBuf>,
    pub split: SplitConfig,
    pub activity_threshold: f64,
    pub background_decay: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frames_dir: None,
            split: SplitConfig::default(),
            activity_threshold: 0.02,
            background_decay: DEFAULT_BACKGROUND_DECAY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub gaps: Vec<usize>,
    pub grid_step: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gaps: DEFAULT_GAPS.to_vec(),
            grid_step: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub data: DataConfig,
    /// Required for directory datasets; derived from `[synth]` otherwise.
    pub rig: Option<CameraRig>,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Default for Config {
    /// Desk-scale defaults: 64x64 synthetic three-camera scene with a
    /// six-level generator.
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            rig: None,
            synth: SynthConfig::default(),
            model: ModelConfig {
                generator: GeneratorSpec::with_depth(16, 6),
                discriminator: DiscriminatorSpec {
                    in_channels: 6,
                    base_filters: 16,
                    n_layers: 3,
                },
            },
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    /// Loads `path` (or the defaults) and applies `section.key=value`
    /// overrides; values use TOML syntax, bare words are read as strings.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (text, base) = match path {
            Some(p) => (
                std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                p.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (String::new(), PathBuf::from(".")),
        };
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let mut cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.base_dir = base;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy whose `frames_dir` no longer depends on the config file location.
    pub fn detached(&self) -> Result<Self> {
        let mut cfg = self.clone();
        if let Some(dir) = self.frames_dir() {
            cfg.data.frames_dir = Some(std::path::absolute(&dir)?);
        }
        cfg.base_dir = PathBuf::from(".");
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.split.validate()?;
        self.train.validate()?;
        self.model.generator.validate()?;
        self.model.discriminator.validate()?;
        if self.data.frames_dir.is_some() && self.rig.is_none() {
            return Err(Error::Config("a [rig] section is required with data.frames_dir".into()));
        }
        if self.data.frames_dir.is_none() {
            self.synth.validate()?;
        }
        let (h, w) = self.rig()?.frame_size();
        self.model.generator.check_resolution(h, w)?;
        self.model.discriminator.check_resolution(h, w)?;
        if self.eval.gaps.contains(&0) {
            return Err(Error::Config("eval gaps must be positive".into()));
        }
        crate::fusion::grid_parts(self.eval.grid_step)?;
        Ok(())
    }

    pub fn rig(&self) -> Result<CameraRig> {
        match &self.rig {
            Some(r) => Ok(r.clone()),
            None => self.synth.rig(),
        }
    }

    pub fn is_synthetic(&self) -> bool {
        self.data.frames_dir.is_none()
    }

    pub fn frames_dir(&self) -> Option<PathBuf> {
        self.data.frames_dir.as_ref().map(|d| self.base_dir.join(d))
    }

    /// Loads (or renders) the dataset described by this config.
    pub fn load_store(&self) -> Result<SequenceStore> {
        match self.frames_dir() {
            Some(root) => {
                let rig = self.rig()?;
                let dirs: BTreeMap<_, _> = rig
                    .cameras()
                    .iter()
                    .map(|c| (c.id, root.join(format!("cam{}", c.id))))
                    .collect();
                ingest(&dirs, &rig, &self.data.split)
            }
            None => synthesize(&SynthConfig {
                split: self.data.split.clone(),
                ..self.synth.clone()
            }),
        }
    }

    pub fn gating(&self, store: &SequenceStore) -> Gating {
        Gating::from_store(store, self.data.background_decay, self.data.activity_threshold)
    }

    pub fn dataset_id(&self) -> String {
        match self.frames_dir() {
            Some(d) => d.display().to_string(),
            None => format!("synthetic-seed{}", self.synth.seed),
        }
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for part in sections {
        node = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_consistent() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let back = Config::from_toml(&cfg.to_toml(), Path::new(".")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn overrides_parse() {
        let text = r#"
            [train]
            steps = 12
            lambda_l1 = 50.0

            [synth]
            seed = 3
            sequence_length = 50

            [eval]
            gaps = [1, 2]
        "#;
        let cfg = Config::from_toml(text, Path::new(".")).unwrap();
        assert_eq!(cfg.train.steps, 12);
        assert_eq!(cfg.train.learning_rate, 0.0002);
        assert_eq!(cfg.synth.seed, 3);
        assert_eq!(cfg.eval.gaps, vec![1, 2]);
    }

    #[test]
    fn overrides_replace_single_keys() {
        let cfg = Config::load_with_overrides(
            None,
            &["train.steps=7".into(), "synth.seed=11".into(), "eval.gaps=[1, 5]".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.synth.seed, 11);
        assert_eq!(cfg.eval.gaps, vec![1, 5]);
        assert!(Config::load_with_overrides(None, &["train.steps".into()]).is_err());
        assert!(Config::load_with_overrides(None, &["train.steps=-3".into()]).is_err());
    }

    #[test]
    fn directory_dataset_needs_rig() {
        let text = "[data]\nframes_dir = \"frames\"\n";
        assert!(Config::from_toml(text, Path::new(".")).is_err());
    }

    #[test]
    fn resolution_must_match_model() {
        let text = "[synth]\nframe_size = 48\n";
        assert!(matches!(
            Config::from_toml(text, Path::new(".")),
            Err(Error::BadResolution { .. })
        ));
    }
}
