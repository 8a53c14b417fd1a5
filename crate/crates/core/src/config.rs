//! Run configuration: one JSON document with model, training, streak and
//! metric sections, plus dotted-path overrides such as
//! `model.em.iterations=3` or `model.depths=2,2,2,0`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::metrics::SsimParams;
use crate::model::ModelConfig;
use crate::rain::StreakParams;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub streaks: StreakParams,
    pub metrics: SsimParams,
}

impl RunConfig {
    /// Desk-scale model and training presets.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            ..Self::default()
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.streaks.validate()?;
        self.metrics.validate()
    }

    /// Applies `(dotted.path, value)` overrides in order. The path must name
    /// an existing field; the value is parsed according to that field's
    /// current JSON type.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for (path, raw) in overrides {
            set_path(&mut doc, path, raw)?;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("override produced an invalid config: {e}")))
    }
}

fn set_path(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    let mut cur = doc;
    for key in path.split('.') {
        cur = cur
            .as_object_mut()
            .and_then(|o| o.get_mut(key))
            .ok_or_else(|| Error::Config(format!("unknown configuration key {path:?}")))?;
    }
    *cur = parse_like(cur, raw).map_err(|why| Error::Config(format!("--{path} {raw:?}: {why}")))?;
    Ok(())
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn parse_like(current: &Value, raw: &str) -> std::result::Result<Value, String> {
    let raw = raw.trim();
    // optional fields accept `null`; required ones fail on deserialization
    if raw == "null" {
        return Ok(Value::Null);
    }
    match current {
        Value::Bool(_) => raw
            .parse::<bool>()
            .map(Value::Bool)
            .map_err(|_| "expected true or false".into()),
        Value::Number(_) => match parse_scalar(raw) {
            v @ Value::Number(_) => Ok(v),
            _ => Err("expected a number".into()),
        },
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Array(items) => {
            let parts: Vec<&str> = raw.trim_matches(['[', ']']).split(',').collect();
            if !items.is_empty() && parts.len() != items.len() {
                return Err(format!("expected {} comma-separated values", items.len()));
            }
            parts
                .iter()
                .enumerate()
                .map(|(i, p)| match items.get(i) {
                    Some(item) => parse_like(item, p),
                    None => Ok(parse_scalar(p.trim())),
                })
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        Value::Null => Ok(parse_scalar(raw)),
        Value::Object(_) => Err("cannot override a whole section".into()),
    }
}
