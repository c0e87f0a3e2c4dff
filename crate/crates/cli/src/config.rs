//! The `--config` file. Every section is optional and overrides only the keys
//! it names; the rest comes from the preset or the library defaults.

use std::path::Path;

use ltsa::cohort::CohortConfig;
use ltsa::evaluation::EvalGrid;
use ltsa::trainer::TrainConfig;
use ltsa::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub const DEFAULT_BOOT: usize = 1000;
pub const DEFAULT_SPLIT: [f64; 3] = [0.7, 0.1, 0.2];
const SECTIONS: [&str; 5] = ["cohort", "train", "grid", "n_boot", "split"];

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    raw: Map<String, Value>,
}

/// Overlay `patch` on `base`, refusing keys the base does not have.
fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = format!("{path}.{k}");
                match b.get_mut(k) {
                    Some(slot) if slot.is_null() || !slot.is_object() => *slot = v.clone(),
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(Error::Config(format!("unknown config key {here}"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let Value::Object(raw) = value else {
            return Err(Error::Config("expected a JSON object".into()));
        };
        if let Some(k) = raw.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown config section {k:?}; expected one of {SECTIONS:?}")));
        }
        Ok(Self { raw })
    }

    fn section<T: Serialize + DeserializeOwned>(&self, name: &str, base: T) -> Result<T> {
        let Some(patch) = self.raw.get(name) else {
            return Ok(base);
        };
        let mut v = serde_json::to_value(&base)?;
        merge(&mut v, patch, name)?;
        serde_json::from_value(v).map_err(|e| Error::Config(format!("section {name}: {e}")))
    }

    pub fn cohort(&self, base: CohortConfig) -> Result<CohortConfig> {
        self.section("cohort", base)
    }

    pub fn train(&self, base: TrainConfig) -> Result<TrainConfig> {
        self.section("train", base)
    }

    pub fn grid(&self) -> Result<EvalGrid> {
        self.section("grid", EvalGrid::default())
    }

    pub fn n_boot(&self) -> Result<usize> {
        self.section("n_boot", DEFAULT_BOOT)
    }

    pub fn split(&self) -> Result<[f64; 3]> {
        self.section("split", DEFAULT_SPLIT)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from(json: &str) -> RunConfig {
        let Value::Object(raw) = serde_json::from_str(json).unwrap() else { panic!() };
        RunConfig { raw }
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = from(r#"{"train": {"lr": 0.001, "loss": {"beta": 0.3}}, "n_boot": 5}"#);
        let t = c.train(TrainConfig::default()).unwrap();
        assert_eq!(t.lr, 0.001);
        assert_eq!(t.loss.beta, 0.3);
        assert_eq!(t.patience, 10);
        assert_eq!(c.n_boot().unwrap(), 5);
        assert_eq!(c.grid().unwrap(), EvalGrid::default());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let c = from(r#"{"train": {"learning_rate": 0.1}}"#);
        assert!(matches!(c.train(TrainConfig::default()), Err(Error::Config(_))));
        let c = from(r#"{"train": {"lr": "fast"}}"#);
        assert!(matches!(c.train(TrainConfig::default()), Err(Error::Config(_))));
    }
}
