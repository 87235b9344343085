use serde::{Deserialize, Serialize};

use crate::aqm::StackConfig;
use crate::error::{Error, Result};
use crate::memory::Policy;
use crate::metrics::ProbeConfig;
use crate::streamio::StreamSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Compressed self-replay.
    #[default]
    Aqm,
    /// Raw-sample reservoir replay at the same byte budget.
    RawReplay,
    /// No memory at all.
    FineTune,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Aqm => "aqm",
            Method::RawReplay => "raw_replay",
            Method::FineTune => "fine_tune",
        })
    }
}

fn d_one() -> usize {
    1
}
fn d_true() -> bool {
    true
}
fn d_probe_size() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub method: Method,
    /// Total storage budget in bytes, model included.
    pub capacity: usize,
    /// Distortion threshold for adaptive compression.
    pub d_th: f64,
    /// Updates per incoming batch.
    #[serde(default = "d_one")]
    pub inner_iterations: usize,
    #[serde(default)]
    pub policy: Policy,
    /// Switch to density-driven eviction once any codebook freezes.
    #[serde(default = "d_true")]
    pub auto_kde: bool,
    #[serde(default = "d_true")]
    pub replay: bool,
    /// Train the external linear learner and fill the accuracy matrix.
    #[serde(default = "d_true")]
    pub probe: bool,
    /// Track drift of held-out first-task samples stored at the end of task 1.
    #[serde(default)]
    pub drift_probe: bool,
    #[serde(default = "d_probe_size")]
    pub drift_probe_size: usize,
    #[serde(default = "d_one")]
    pub log_every: usize,
    pub stack: StackConfig,
    #[serde(default)]
    pub stream: StreamSpec,
    #[serde(default)]
    pub learner: ProbeConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.inner_iterations == 0 {
            return Err(Error::Config("inner_iterations must be >= 1".into()));
        }
        if !(self.d_th > 0.0) {
            return Err(Error::Config(format!("d_th must be positive, got {}", self.d_th)));
        }
        if let Some(t) = self.stack.freeze_thresholds.iter().find(|t| !(**t > 0.0)) {
            return Err(Error::Config(format!("freeze thresholds must be positive, got {t}")));
        }
        if !(self.learner.lr > 0.0) {
            return Err(Error::Config("learner lr must be positive".into()));
        }
        if self.capacity == 0 {
            return Err(Error::Config("capacity must be positive".into()));
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, path: &[&str], value: toml::Value, full: &str) -> Result<()> {
    let (head, rest) = path.split_first().ok_or_else(|| Error::Config(format!("empty override key in `{full}`")))?;
    let slot = match root {
        toml::Value::Table(t) => {
            if rest.is_empty() {
                t.insert(head.to_string(), value);
                return Ok(());
            }
            t.entry(head.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()))
        }
        toml::Value::Array(a) => {
            let i: usize = head.parse().map_err(|_| Error::Config(format!("`{head}` is not an index in `{full}`")))?;
            let len = a.len();
            let slot = a
                .get_mut(i)
                .ok_or_else(|| Error::Config(format!("index {i} out of range ({len}) in `{full}`")))?;
            if rest.is_empty() {
                *slot = value;
                return Ok(());
            }
            slot
        }
        _ => return Err(Error::Config(format!("`{head}` does not name a table in `{full}`"))),
    };
    set_path(slot, rest, value, full)
}

/// Applies `key.path=value` overrides to a TOML document; values are parsed as TOML
/// literals and fall back to strings. Array elements are addressed by index.
pub fn apply_overrides<T: serde::de::DeserializeOwned>(text: &str, overrides: &[String]) -> Result<T> {
    let mut doc: toml::Value = toml::from_str::<toml::Table>(text)
        .map(toml::Value::Table)
        .map_err(|e| Error::Config(e.to_string()))?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        let path: Vec<&str> = k.trim().split('.').collect();
        set_path(&mut doc, &path, parse_value(v.trim()), o)?;
    }
    doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
capacity = 5000
d_th = 0.01
[stack]
levels = [{ latent_channels = 4, codebook_size = 16 }]
"#;

    #[test]
    fn overrides_reach_nested_keys() {
        let c: RunConfig = apply_overrides(
            BASE,
            &["seed=7".into(), "stack.levels.0.codebook_size=32".into(), "policy=kde".into(), "stream.tasks=2".into()],
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.stack.levels[0].codebook_size, 32);
        assert_eq!(c.policy, Policy::Kde);
        assert_eq!(c.stream.tasks, 2);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(apply_overrides::<RunConfig>(BASE, &["nope=1".into()]).is_err());
        assert!(apply_overrides::<RunConfig>(BASE, &["stack.levels.3.kernel=1".into()]).is_err());
        assert!(apply_overrides::<RunConfig>(BASE, &["seed".into()]).is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let c = RunConfig::from_toml(BASE).unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }
}
