//! Merged run configuration with per-field provenance, serialized into every
//! output directory as `resolved_config.json`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

pub const SOURCE_DEFAULT: &str = "default";
pub const SOURCE_CONFIG_FILE: &str = "config-file";
pub const SOURCE_FLAG: &str = "flag";

#[derive(Debug, Clone, Serialize)]
pub struct Provenanced {
    pub value: serde_json::Value,
    pub source: String,
}

/// Final parameter values for one run, each tagged with where it came from
/// (flag > config-file > default).
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub params: BTreeMap<String, Provenanced>,
}

impl RunConfig {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            params: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, name: &str, value: impl Serialize, source: &str) {
        self.params.insert(
            name.to_string(),
            Provenanced {
                value: serde_json::to_value(value).expect("serializable"),
                source: source.to_string(),
            },
        );
    }

    /// Records `flag` when given, else `default`.
    pub fn set_opt<T: Serialize + Clone>(&mut self, name: &str, flag: &Option<T>, default: T) -> T {
        match flag {
            Some(v) => {
                self.set(name, v, SOURCE_FLAG);
                v.clone()
            }
            None => {
                self.set(name, &default, SOURCE_DEFAULT);
                default
            }
        }
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(dir.join("resolved_config.json"), text)
    }
}

/// Overlays `patch` onto `base` (one level deep), recording the provenance of
/// every key of `base` into `cfg`.
pub fn merge_object(
    cfg: &mut RunConfig,
    base: &mut serde_json::Map<String, serde_json::Value>,
    patch: &serde_json::Map<String, serde_json::Value>,
    source: &str,
) {
    for (k, v) in patch {
        base.insert(k.clone(), v.clone());
        cfg.set(k, v, source);
    }
    for (k, v) in base.iter() {
        if !cfg.params.contains_key(k) {
            cfg.set(k, v, SOURCE_DEFAULT);
        }
    }
}
