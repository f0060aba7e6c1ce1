use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use standda::experiments::{RandomBundleSpec, SplitSpec, SynthParams};
use standda::inference::{InferenceConfig, SearchConfig};
use standda::Backend;

use crate::failure::Failure;

/// Settings shared by `detect` and `infer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferRunConfig {
    /// Bundle file; a random bundle from `random_bundle` is used when absent.
    pub bundle: Option<PathBuf>,
    pub random_bundle: RandomBundleSpec,
    /// CSV input; one synthetic draw from `synthetic` is used when absent.
    pub data: Option<PathBuf>,
    pub split: Option<SplitSpec>,
    pub synthetic: SynthParams,
    pub seed: u64,
    pub alpha: f64,
    pub rate: f64,
    pub backend: Backend,
    pub step_sigmas: f64,
    pub range_sigmas: f64,
}

impl Default for InferRunConfig {
    fn default() -> Self {
        let search = SearchConfig::default();
        Self {
            bundle: None,
            random_bundle: RandomBundleSpec::default(),
            data: None,
            split: None,
            synthetic: SynthParams::new(150, 25, 10, 0.0, 0.0),
            seed: 0,
            alpha: 0.05,
            rate: search.rate,
            backend: search.backend,
            step_sigmas: search.step_sigmas,
            range_sigmas: search.range_sigmas,
        }
    }
}

impl InferRunConfig {
    pub fn validate(&self) -> Result<(), Failure> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Failure::config(format!("alpha: must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Failure::config(format!("rate: must lie in (0, 1), got {}", self.rate)));
        }
        if !(self.step_sigmas > 0.0) {
            return Err(Failure::config("step_sigmas: must be > 0"));
        }
        if !(self.range_sigmas > 0.0) {
            return Err(Failure::config("range_sigmas: must be > 0"));
        }
        if self.data.is_some() && self.split.is_none() {
            return Err(Failure::config("split: required when data is set"));
        }
        Ok(())
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            alpha: self.alpha,
            search: SearchConfig {
                rate: self.rate,
                step_sigmas: self.step_sigmas,
                range_sigmas: self.range_sigmas,
                backend: self.backend,
                ..SearchConfig::default()
            },
            parallel_anomalies: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleCheckConfig {
    pub bundle: PathBuf,
}

/// Inputs that shape a configuration before it is typed.
pub struct Sources<'a> {
    pub file: Option<&'a Path>,
    pub overrides: &'a [String],
    pub seed: Option<u64>,
}

/// Defaults, then the config file, then `key=value` overrides, then `--seed`.
/// Unknown keys are rejected when the merged tree is typed.
pub fn resolve<T>(defaults: Option<&T>, src: &Sources<'_>) -> Result<T, Failure>
where
    T: Serialize + DeserializeOwned,
{
    let mut tree = match defaults {
        Some(d) => serde_json::to_value(d).map_err(|e| Failure::config(e.to_string()))?,
        None => Value::Object(Map::new()),
    };
    if let Some(path) = src.file {
        merge(&mut tree, read_file(path)?);
    }
    for raw in src.overrides {
        let (key, value) = raw
            .split_once('=')
            .ok_or_else(|| Failure::config(format!("override {raw:?}: expected key=value")))?;
        set_path(&mut tree, key.trim(), parse_scalar(value.trim()))?;
    }
    if let Some(seed) = src.seed {
        set_path(&mut tree, "seed", Value::from(seed))?;
    }
    serde_json::from_value(tree).map_err(|e| Failure::config(format!("config: {e}")))
}

fn read_file(path: &Path) -> Result<Value, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::io(format!("config: {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text)
            .map_err(|e| Failure::config(format!("config: {}: {e}", path.display())))
    } else {
        let table: toml::Table = toml::from_str(&text)
            .map_err(|e| Failure::config(format!("config: {}: {e}", path.display())))?;
        serde_json::to_value(table).map_err(|e| Failure::config(e.to_string()))
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
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

/// A TOML literal when it parses as one, a bare string otherwise.
fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<(), Failure> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Failure::config(format!("override key {key:?} is malformed")));
    }
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        let Value::Object(map) = node else {
            return Err(Failure::config(format!(
                "{}: not a table, cannot set {key}",
                parts[..i].join(".")
            )));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("key has at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with(overrides: &[&str]) -> Result<InferRunConfig, Failure> {
        let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        resolve(
            Some(&InferRunConfig::default()),
            &Sources {
                file: None,
                overrides: &overrides,
                seed: None,
            },
        )
    }

    #[test]
    fn overrides_are_typed() {
        let c = with(&["alpha=0.1", "synthetic.delta=2", "bundle=a/b.json", "backend=\"parallel\""]).unwrap();
        assert_eq!(c.alpha, 0.1);
        assert_eq!(c.synthetic.delta, 2.0);
        assert_eq!(c.synthetic.n_source, 150);
        assert_eq!(c.bundle, Some(PathBuf::from("a/b.json")));
        assert_eq!(c.backend, Backend::Parallel);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = with(&["alhpa=0.1"]).unwrap_err();
        assert_eq!(e.code, 2);
        assert!(e.message.contains("alhpa"), "{}", e.message);
        assert!(with(&["synthetic.bogus=1"]).is_err());
        assert!(with(&["alpha"]).is_err());
    }

    #[test]
    fn files_merge_below_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "alpha = 0.2\nseed = 4\n[synthetic]\nn_target = 30\n").unwrap();
        let overrides = vec!["alpha=0.3".to_string()];
        let c: InferRunConfig = resolve(
            Some(&InferRunConfig::default()),
            &Sources {
                file: Some(&path),
                overrides: &overrides,
                seed: Some(9),
            },
        )
        .unwrap();
        assert_eq!((c.alpha, c.seed, c.synthetic.n_target), (0.3, 9, 30));
    }
}
