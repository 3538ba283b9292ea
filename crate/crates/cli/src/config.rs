//! Resolved run configuration: defaults, then a flat TOML file, then flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use wvlp_core::model::ModelConfig;
use wvlp_core::trainer::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Reads a flat key-value TOML file. Every key must name a model or a
/// training field.
pub fn read_config_file(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::usage(format!("bad config {}: {e}", path.display())))?;
    let value = serde_json::to_value(table).map_err(|e| CliError::usage(e.to_string()))?;
    match value {
        Value::Object(m) => Ok(m),
        _ => Err(CliError::usage("config file must be a table")),
    }
}

fn object(v: impl Serialize) -> Map<String, Value> {
    match serde_json::to_value(v).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("configs are structs"),
    }
}

/// `defaults < file < overrides`. Keys are routed to the model or training
/// block by name.
pub fn resolve(file: Option<&Map<String, Value>>, overrides: &Map<String, Value>) -> Result<RunConfig, CliError> {
    let mut model = object(ModelConfig::default());
    let mut train = object(TrainConfig::default());
    for layer in file.into_iter().chain(std::iter::once(overrides)) {
        for (k, v) in layer {
            if k == "vocab_size" {
                return Err(CliError::usage("vocab_size is taken from the corpus vocabulary"));
            }
            if model.contains_key(k) {
                model.insert(k.clone(), v.clone());
            } else if train.contains_key(k) {
                train.insert(k.clone(), v.clone());
            } else {
                return Err(CliError::usage(format!("unknown config key {k:?}")));
            }
        }
    }
    let model: ModelConfig = serde_json::from_value(Value::Object(model))
        .map_err(|e| CliError::usage(format!("model config: {e}")))?;
    let train: TrainConfig = serde_json::from_value(Value::Object(train))
        .map_err(|e| CliError::usage(format!("training config: {e}")))?;
    ModelConfig {
        vocab_size: model.vocab_size.max(wvlp_core::tokenizer::SPECIALS.len() + 1),
        ..model.clone()
    }
    .validate()
    .map_err(CliError::usage)?;
    train.validate().map_err(CliError::usage)?;
    Ok(RunConfig { model, train })
}

/// Hex SHA-256 of the canonical (key-sorted) JSON form.
pub fn config_hash(v: &impl Serialize) -> String {
    let value = serde_json::to_value(v).expect("config serializes");
    let bytes = serde_json::to_vec(&value).expect("json value serializes");
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn map(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn precedence() {
        let file = map(json!({"steps": 50, "hidden_dim": 32, "projection_dim": 32, "seed": 4}));
        let flags = map(json!({"steps": 7}));
        let c = resolve(Some(&file), &flags).unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.seed, 4);
        assert_eq!(c.model.hidden_dim, 32);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_and_invalid_keys() {
        assert!(resolve(None, &map(json!({"stepz": 1}))).is_err());
        assert!(resolve(None, &map(json!({"steps": "many"}))).is_err());
        assert!(resolve(None, &map(json!({"heads": 5}))).is_err());
        assert!(resolve(None, &map(json!({"vocab_size": 50}))).is_err());
    }

    #[test]
    fn hash_ignores_construction_order() {
        let a = resolve(None, &map(json!({"steps": 3, "seed": 1}))).unwrap();
        let b = resolve(None, &map(json!({"seed": 1, "steps": 3}))).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        let c = resolve(None, &map(json!({"seed": 2, "steps": 3}))).unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
    }
}
