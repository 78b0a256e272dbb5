//! Run configuration: the TOML file schema, dotted-path overrides, and the
//! content hash used to name output directories.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::RateConfig;
use crate::error::{Error, Result};
use crate::learner::{TeacherOracle, TrainingConfig};
use crate::scenarios::{PartitionKind, PretrainSpec};
use crate::slow_route::{LabelMode, DEFAULT_BUFFER_CAPACITY};
use crate::world::WorldConfig;

/// Full description of one run. Every field has a default; unknown keys in a
/// config file are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub partition: PartitionKind,
    pub pretrain: PretrainSpec,
    pub rates: RateConfig,
    pub training: TrainingConfig,
    pub teacher: TeacherOracle,
    /// Teacher pseudo labels (tta) or ground-truth labels (ol).
    pub mode: LabelMode,
    /// Frozen runs (false) skip ingestion, training, and broadcasts.
    pub adapt: bool,
    /// Replay buffer size R.
    pub buffer_capacity: usize,
    /// Defaults to 2/5 of the horizon (the first two of five hours).
    pub pretrain_duration_s: Option<f64>,
    /// Defaults to 3/5 of the horizon.
    pub test_duration_s: Option<f64>,
    /// Lookback of the future metric (stale-model delay).
    pub future_delay_s: f64,
    /// Report the mean of per-agent mIoU instead of the fleet-global
    /// merge-then-score aggregate.
    pub per_agent_eval: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            partition: PartitionKind::Spatial,
            pretrain: PretrainSpec::default(),
            rates: RateConfig::default(),
            training: TrainingConfig::default(),
            teacher: TeacherOracle::default(),
            mode: LabelMode::Tta,
            adapt: true,
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            pretrain_duration_s: None,
            test_duration_s: None,
            future_delay_s: 300.0,
            per_agent_eval: false,
        }
    }
}

impl RunConfig {
    pub fn pretrain_duration(&self) -> f64 {
        self.pretrain_duration_s.unwrap_or(0.4 * self.world.horizon_s)
    }

    pub fn test_duration(&self) -> f64 {
        self.test_duration_s.unwrap_or(0.6 * self.world.horizon_s)
    }

    pub fn test_start(&self) -> f64 {
        self.pretrain_duration()
    }

    pub fn test_end(&self) -> f64 {
        self.pretrain_duration() + self.test_duration()
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.rates.validate()?;
        self.training.validate()?;
        self.pretrain.validate()?;
        self.teacher.validate()?;
        if self.buffer_capacity == 0 {
            return Err(Error::config("buffer capacity must be positive"));
        }
        if !(self.future_delay_s >= 0.0) {
            return Err(Error::config("future delay must be non-negative"));
        }
        let end = self.test_end();
        if end > self.world.horizon_s + 1e-9 {
            return Err(Error::config(format!(
                "pretrain + test duration ({end} s) exceeds the horizon ({} s)",
                self.world.horizon_s
            )));
        }
        Ok(())
    }

    /// Stable content hash over the resolved configuration.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

/// Parse a TOML config, applying `--set key=value` dotted-path overrides
/// before deserialization.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut value: toml::Value = text
        .parse()
        .map_err(|e| Error::config(format!("invalid TOML: {e}")))?;
    for (path, raw) in overrides {
        apply_override(&mut value, path, raw)?;
    }
    value
        .try_into()
        .map_err(|e| Error::config(format!("invalid config: {e}")))
}

pub fn load_config(path: &std::path::Path, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text, overrides)
}

fn apply_override(root: &mut toml::Value, path: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("invalid override path '{path}'")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override path '{path}' does not address a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("override path '{path}' does not address a table")))?;
    // Interpret the value as TOML when possible, otherwise as a bare string.
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Value>() {
        Ok(doc) => doc.get("v").cloned().unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}
