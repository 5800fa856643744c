//! Run configuration: a TOML file plus dotted `key=value` overrides.
//!
//! ```toml
//! dataset = "data/desk"
//! output = "runs/desk"
//! checkpoint_every = 1000
//!
//! [model]
//! gaussians = 5000
//! variant = "basis"        # or "direct_offsets"
//!
//! [train]
//! iterations = 10000
//! lr_mlp = 5e-4
//!
//! [synth]
//! frames = 200
//! ```
//!
//! Every section and key is optional; unknown keys are rejected. An override
//! such as `train.iterations=500` is parsed as a TOML value, falling back to
//! a plain string (`dataset=/tmp/x`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::SynthSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,
    /// Iterations between periodic checkpoints; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Restrict training to the first frames of the dataset.
    pub train_frames: Option<usize>,
    /// Fit a pose basis with this many components after training.
    pub pca_components: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/desk"),
            output: PathBuf::from("runs/desk"),
            checkpoint_every: 1000,
            train_frames: None,
            pca_components: crate::pca::DEFAULT_COMPONENTS,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text` (may be empty), applies overrides in order, validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config parse error: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads the file at `path` (or defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.pca_components == 0 {
            return Err(Error::Config("pca_components must be positive".into()));
        }
        Ok(())
    }

    /// Sets every seed from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run configuration serializes to TOML")
    }
}

fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies one `a.b.c=value` override.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn file_and_overrides_compose() {
        let text = "output = \"runs/a\"\n[train]\niterations = 50\nstage_basis_start = 10\nstage_sh1_start = 20\n[model]\nvariant = \"direct_offsets\"\n";
        let c = RunConfig::from_toml(
            text,
            &["train.iterations=70".into(), "dataset=/tmp/d".into(), "model.hidden=[16, 16]".into()],
        )
        .unwrap();
        assert_eq!(c.train.iterations, 70);
        assert_eq!(c.output, PathBuf::from("runs/a"));
        assert_eq!(c.dataset, PathBuf::from("/tmp/d"));
        assert_eq!(c.model.hidden, vec![16, 16]);
        assert_eq!(c.model.variant, Variant::DirectOffsets);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for bad in ["[train]\nlearning_rate = 1.0\n", "bogus = 1\n", "[model]\ngausians = 4\n"] {
            assert!(matches!(RunConfig::from_toml(bad, &[]), Err(Error::Config(_))), "{bad}");
        }
        assert!(matches!(RunConfig::from_toml("", &["train.nope=1".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("", &["noequals".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("", &["train.iterations=abc".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig {
            train_frames: Some(12),
            ..RunConfig::default()
        };
        c.set_seed(9);
        assert_eq!(RunConfig::from_toml(&c.to_toml(), &[]).unwrap(), c);
    }
}
