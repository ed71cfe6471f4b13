//! Layered `key=value` settings: command defaults, then the config file, then
//! flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use neupath::inversion::{parse_key_values, InversionConfig};
use neupath::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Keys absent from `defaults` are rejected.
    pub fn resolve(defaults: Vec<(String, String)>, config: Option<&Path>, flags: Vec<(String, String)>) -> Result<Self> {
        let mut values: BTreeMap<String, String> = defaults.into_iter().collect();
        let mut apply = |k: String, v: String, origin: &str| {
            if !values.contains_key(&k) {
                return Err(Error::InvalidArgument(format!("unknown setting {k:?} ({origin})")));
            }
            values.insert(k, v);
            Ok(())
        };
        if let Some(path) = config {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))?;
            for (k, v) in parse_key_values(&text)? {
                apply(k, v, "config file")?;
            }
        }
        for (k, v) in flags {
            apply(k, v, "flag")?;
        }
        Ok(Settings { values })
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("setting {key} has no default"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.str(key);
        v.parse().map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse {v:?}")))
    }

    /// Integer setting where a negative value means "not set".
    pub fn optional(&self, key: &str) -> Result<Option<usize>> {
        let v: i64 = self.get(key)?;
        Ok(usize::try_from(v).ok())
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.str(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(Error::InvalidArgument(format!("{key}: expected true/false, got {v:?}"))),
        }
    }

    /// The inversion settings present in this set.
    pub fn inversion(&self) -> Result<InversionConfig> {
        let mut cfg = InversionConfig::default();
        for (k, _) in inversion_defaults() {
            cfg.set(&k, self.str(&k))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.values.iter()
    }
}

pub fn inversion_defaults() -> Vec<(String, String)> {
    parse_key_values(&InversionConfig::default().to_key_values()).expect("own output parses")
}

/// Builds a defaults list from literal pairs.
pub fn defaults(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// Parses a `--set key=value` flag.
pub fn parse_assignment(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}
