//! Config files and default locations.
//!
//! A config file is a JSON object. Top-level keys that name a flag of the
//! running command replace that flag's value; other top-level keys are
//! ignored so one file can serve several commands. A key equal to the
//! command path (for example `"manifest split"`) holds an object applied on
//! top, and unknown keys inside it are rejected.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::Usage;

pub const DATA_DIR_ENV: &str = "STATECHEF_DATA_DIR";

/// Storage root for default outputs.
pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("statechef-data"))
}

/// `explicit` when given, otherwise `name` under the data directory.
pub fn output_path(explicit: Option<&Path>, name: &str) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| data_dir().join(name))
}

pub fn merge<T: Serialize + DeserializeOwned>(flags: T, config: Option<&Path>, command: &str) -> anyhow::Result<T> {
    let Some(path) = config else {
        return Ok(flags);
    };
    let text =
        std::fs::read_to_string(path).map_err(|e| Usage(format!("cannot read config {}: {e}", path.display())))?;
    let file: Map<String, Value> = serde_json::from_str(&text)
        .map_err(|e| Usage(format!("config {} is not a JSON object: {e}", path.display())))?;
    let Value::Object(mut merged) = serde_json::to_value(&flags)? else {
        unreachable!("flag structs serialize to objects")
    };
    for (key, value) in &file {
        if merged.contains_key(key) {
            merged.insert(key.clone(), value.clone());
        }
    }
    match file.get(command) {
        Some(Value::Object(section)) => {
            for (key, value) in section {
                if !merged.contains_key(key) {
                    return Err(Usage(format!("config section `{command}` has unknown key `{key}`")).into());
                }
                merged.insert(key.clone(), value.clone());
            }
        }
        Some(_) => return Err(Usage(format!("config section `{command}` must be an object")).into()),
        None => {}
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Usage(format!("config {}: {e}", path.display())).into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, Debug, PartialEq)]
    struct Flags {
        seed: u64,
        ratios: String,
    }

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn config_overrides_flags() {
        let f = write(r#"{"seed": 9, "other_command_flag": 1, "manifest split": {"ratios": "0.8,0.1,0.1"}}"#);
        let flags = Flags {
            seed: 1,
            ratios: "0.7,0.15,0.15".into(),
        };
        let merged = merge(flags, Some(f.path()), "manifest split").unwrap();
        assert_eq!(
            merged,
            Flags {
                seed: 9,
                ratios: "0.8,0.1,0.1".into()
            }
        );
    }

    #[test]
    fn unknown_section_key_is_a_usage_error() {
        let f = write(r#"{"manifest split": {"ratio": "x"}}"#);
        let err = merge(
            Flags {
                seed: 1,
                ratios: String::new(),
            },
            Some(f.path()),
            "manifest split",
        )
        .unwrap_err();
        assert!(err.downcast_ref::<Usage>().is_some());
    }

    #[test]
    fn no_config_keeps_flags() {
        let flags = Flags {
            seed: 3,
            ratios: "a".into(),
        };
        assert_eq!(
            merge(flags, None, "x").unwrap(),
            Flags {
                seed: 3,
                ratios: "a".into()
            }
        );
    }
}
