//! Run configuration: preset base, JSON file overlay, then flag overrides.

use std::path::{Path, PathBuf};

use bt_adapter::config::Preset;
use bt_adapter::data::DataConfig;
use bt_adapter::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub seed: u64,
    pub steps: u64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn base(preset: Preset) -> Self {
        Self {
            preset,
            model: ModelConfig::preset(preset),
            data: DataConfig::default(),
            seed: 0,
            steps: 300,
            checkpoint_every: 0,
            corpus: None,
            out: None,
        }
    }
}

/// Command-line values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub steps: Option<u64>,
    pub rho: Option<f64>,
    pub branch_layers: Option<usize>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint_every: Option<u64>,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn resolve(file: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let file_value: Option<Value> = match file {
        Some(p) => Some(serde_json::from_slice(&std::fs::read(p)?)?),
        None => None,
    };
    let file_preset = match file_value.as_ref().and_then(|v| v.get("preset")) {
        Some(p) => Some(serde_json::from_value::<Preset>(p.clone())?),
        None => None,
    };
    let preset = ov.preset.or(file_preset).unwrap_or_default();
    let mut value = serde_json::to_value(RunConfig::base(preset))?;
    if let Some(v) = file_value {
        if !v.is_object() {
            return Err(Error::Config("config file must hold a JSON object".into()));
        }
        merge(&mut value, v);
    }
    let mut cfg: RunConfig = serde_json::from_value(value)?;
    cfg.preset = preset;
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(s) = ov.steps {
        cfg.steps = s;
    }
    if let Some(r) = ov.rho {
        cfg.model.mask_ratio = r;
    }
    if let Some(k) = ov.branch_layers {
        cfg.model.branch_layers = k;
    }
    if let Some(c) = &ov.corpus {
        cfg.corpus = Some(c.clone());
    }
    if let Some(o) = &ov.out {
        cfg.out = Some(o.clone());
    }
    if let Some(c) = ov.checkpoint_every {
        cfg.checkpoint_every = c;
    }
    cfg.model.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(v: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), v).unwrap();
        f
    }

    #[test]
    fn file_overlays_preset_and_flags_win() {
        let f = write(r#"{"preset": "paper-table7", "model": {"width": 32, "heads": 4}, "seed": 3}"#);
        let ov = Overrides {
            seed: Some(9),
            rho: Some(0.5),
            ..Overrides::default()
        };
        let c = resolve(Some(f.path()), &ov).unwrap();
        assert_eq!(c.model.layers, 24);
        assert_eq!(c.model.width, 32);
        assert_eq!(c.model.optimizer.lr, 2e-6);
        assert_eq!(c.seed, 9);
        assert_eq!(c.model.mask_ratio, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let f = write(r#"{"model": {"widht": 32}}"#);
        assert!(resolve(Some(f.path()), &Overrides::default()).is_err());
        let f = write(r#"{"stesp": 3}"#);
        assert!(resolve(Some(f.path()), &Overrides::default()).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let ov = Overrides {
            branch_layers: Some(6),
            ..Overrides::default()
        };
        assert!(resolve(None, &ov).is_err());
    }
}
