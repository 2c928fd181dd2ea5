//! Run configuration: one TOML document with `[model]`, `[mel]`, `[train]`,
//! `[solver]` and `[vocoder]` tables, layered over a named preset and then
//! over dotted `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::dsp::{MelConfig, DEFAULT_GL_MOMENTUM};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sampler::SolverConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocoderConfig {
    /// Griffin-Lim iterations; 0 keeps the zero-phase inverse.
    pub gl_iters: usize,
    pub gl_momentum: f64,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        VocoderConfig {
            gl_iters: 32,
            gl_momentum: DEFAULT_GL_MOMENTUM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub mel: MelConfig,
    pub train: TrainConfig,
    pub solver: SolverConfig,
    pub vocoder: VocoderConfig,
}

impl RunConfig {
    pub fn tiny() -> Self {
        RunConfig {
            model: ModelConfig::tiny(),
            mel: MelConfig::paper(),
            train: TrainConfig::tiny(),
            solver: SolverConfig::default(),
            vocoder: VocoderConfig::default(),
        }
    }

    pub fn paper() -> Self {
        RunConfig {
            model: ModelConfig::paper(),
            train: TrainConfig::paper(),
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::config(format!(
                "unknown preset '{other}' (expected 'tiny' or 'paper')"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mel.validate()?;
        self.train.validate()?;
        self.solver.validate()?;
        if self.model.n_mels != self.mel.n_mels {
            return Err(Error::config(format!(
                "model.n_mels {} differs from mel.n_mels {}",
                self.model.n_mels, self.mel.n_mels
            )));
        }
        if !(0.0..1.0).contains(&self.vocoder.gl_momentum) {
            return Err(Error::config("vocoder.gl_momentum must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Preset, then the optional TOML file, then `key=value` overrides.
    pub fn load(preset: &str, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = Self::preset(preset)?;
        let mut tree = Value::try_from(base).map_err(|e| Error::config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
            let doc: Value = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            merge(&mut tree, doc, "")?;
        }
        for ov in overrides {
            apply_override(&mut tree, ov)?;
        }
        let cfg: RunConfig = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn valid_keys(table: &toml::map::Map<String, Value>, prefix: &str) -> String {
    let mut keys: Vec<String> = table.keys().map(|k| join(prefix, k)).collect();
    keys.sort();
    keys.join(", ")
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Overlays `doc` on `tree`, refusing keys `tree` does not have.
fn merge(tree: &mut Value, doc: Value, prefix: &str) -> Result<()> {
    match (tree, doc) {
        (Value::Table(base), Value::Table(over)) => {
            for (k, v) in over {
                let name = join(prefix, &k);
                let listing = valid_keys(base, prefix);
                let slot = base
                    .get_mut(&k)
                    .ok_or_else(|| Error::config(format!("unknown key '{name}'; valid keys: {listing}")))?;
                merge(slot, v, &name)?;
            }
            Ok(())
        }
        (Value::Table(_), _) => Err(Error::config(format!("'{prefix}' must be a table"))),
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies one `dotted.key=value` override.
pub fn apply_override(tree: &mut Value, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{ov}' is not of the form key=value")))?;
    let key = key.trim();
    let mut doc = parse_value(raw.trim());
    for part in key.rsplit('.') {
        if part.is_empty() {
            return Err(Error::config(format!("override key '{key}' has an empty segment")));
        }
        let mut t = toml::map::Map::new();
        t.insert(part.to_string(), doc);
        doc = Value::Table(t);
    }
    merge(tree, doc, "")
}
