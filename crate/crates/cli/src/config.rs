//! Experiment configuration: per-activity defaults, overlaid by a JSON file, overlaid by flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use fastbci::data::fir::FilterMode;
use fastbci::data::Activity;
use fastbci::model::NormKind;
use fastbci::strategy::{MetaConfig, Strategy, TransferConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub mode: FilterMode,
    pub low_hz: f64,
    pub high_hz: f64,
    pub transition_hz: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            mode: FilterMode::BandStop,
            low_hz: 7.0,
            high_hz: 30.0,
            transition_hz: 2.0,
        }
    }
}

/// Everything that determines a pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub activity: Activity,
    pub norm: NormKind,
    pub seed: u64,
    pub filter: FilterConfig,
    pub meta: MetaConfig,
    pub transfer: TransferConfig,
    /// Fine-tuning runs per validation round when pretraining with MAML.
    pub validation_runs: usize,
}

impl ExperimentConfig {
    pub fn defaults(strategy: Strategy, activity: Activity, norm: NormKind) -> Self {
        ExperimentConfig {
            strategy,
            activity,
            norm,
            seed: 0,
            filter: FilterConfig::default(),
            meta: MetaConfig::for_activity(activity),
            transfer: TransferConfig::for_activity(activity),
            validation_runs: 2,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&canonical(serde_json::to_value(self).expect("serializable")))
            .expect("serializable");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Objects with keys sorted recursively, so equal configs hash equally.
fn canonical(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, canonical(v))).collect())
        }
        Value::Array(a) => Value::Array(a.into_iter().map(canonical).collect()),
        other => other,
    }
}

/// Recursively overlays `top` onto `base`.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Flag values that override the file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub strategy: Option<Strategy>,
    pub activity: Option<Activity>,
    pub norm: Option<NormKind>,
    pub seed: Option<u64>,
    pub max_iterations: Option<usize>,
    pub max_epochs: Option<usize>,
}

pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<ExperimentConfig> {
    let file_value = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            if !v.is_object() {
                bail!("config {} must hold a JSON object", p.display());
            }
            v
        }
        None => Value::Object(Default::default()),
    };
    let pick = |key: &str| file_value.get(key).cloned();
    let strategy: Strategy = match (flags.strategy, pick("strategy")) {
        (Some(s), _) => s,
        (None, Some(v)) => serde_json::from_value(v).context("config field `strategy`")?,
        (None, None) => bail!("no strategy given (flag --strategy or config field `strategy`)"),
    };
    let activity: Activity = match (flags.activity, pick("activity")) {
        (Some(a), _) => a,
        (None, Some(v)) => serde_json::from_value(v).context("config field `activity`")?,
        (None, None) => bail!("no activity given (flag --activity or config field `activity`)"),
    };
    let norm: NormKind = match (flags.norm, pick("norm")) {
        (Some(n), _) => n,
        (None, Some(v)) => serde_json::from_value(v).context("config field `norm`")?,
        (None, None) => NormKind::Layer,
    };

    let mut value = serde_json::to_value(ExperimentConfig::defaults(strategy, activity, norm))?;
    merge(&mut value, file_value);
    let mut flag_value = serde_json::json!({
        "strategy": strategy,
        "activity": activity,
        "norm": norm,
    });
    if let Some(seed) = flags.seed {
        flag_value["seed"] = seed.into();
    }
    if let Some(n) = flags.max_iterations {
        flag_value["meta"] = serde_json::json!({ "max_meta_iterations": n });
    }
    if let Some(n) = flags.max_epochs {
        flag_value["transfer"] = serde_json::json!({ "max_epochs": n });
    }
    merge(&mut value, flag_value);
    let config: ExperimentConfig = serde_json::from_value(value).context("invalid experiment config")?;
    match config.strategy {
        Strategy::Maml => config.meta.validate()?,
        Strategy::Transfer => config.transfer.validate(config.norm)?,
    }
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"activity": 3, "seed": 5, "transfer": {"lr": 0.01}, "meta": {"adapt_steps": 7}}"#).unwrap();
        let flags = Overrides {
            strategy: Some(Strategy::Transfer),
            seed: Some(9),
            ..Overrides::default()
        };
        let c = resolve(Some(&path), &flags).unwrap();
        assert_eq!(c.activity.id(), 3);
        assert_eq!(c.seed, 9);
        assert_eq!(c.transfer.lr, 0.01);
        assert_eq!(c.transfer.batch_size, 32);
        assert_eq!(c.meta.adapt_steps, 7);
        assert_eq!(c.meta.inner_lr, 0.01);
        assert_eq!(c.norm, NormKind::Layer);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::defaults(Strategy::Maml, Activity::new(1).unwrap(), NormKind::Batch);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_fields_and_missing_strategy_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"activity": 1, "strategy": "transfer", "bogus": 1}"#).unwrap();
        assert!(resolve(Some(&path), &Overrides::default()).is_err());
        let flags = Overrides {
            activity: Some(Activity::new(1).unwrap()),
            ..Overrides::default()
        };
        assert!(resolve(None, &flags).is_err());
    }
}
