//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{config_err, Error, Result};

/// Every recognised key with its default, in echo order.
const DEFAULTS: &[(&str, &str)] = &[
    ("command", ""),
    ("seed", "0"),
    // data
    ("data", "synth"),
    ("classes", "10"),
    ("per_class", "200"),
    ("channels", "1"),
    ("height", "16"),
    ("width", "16"),
    ("noise", "0.25"),
    ("idx_images", ""),
    ("idx_labels", ""),
    ("split", "all"),
    ("shards", "20"),
    ("val_fraction", "0.2"),
    // model
    ("widths", "8,16,32"),
    ("kernel", "3"),
    ("init_checkpoint", ""),
    // training
    ("mode", "vanilla"),
    ("layers", "2"),
    ("r", "2"),
    ("partial_patch", "true_mean"),
    ("epochs", "10"),
    ("batch_size", "32"),
    ("lr", "0.05"),
    ("momentum", "0.9"),
    ("weight_decay", "0.0001"),
    ("clip", "2"),
    ("warmup_epochs", "1"),
    // cost-sweep
    ("c_x", "192"),
    ("c_y", "64"),
    ("h_y", "120"),
    ("w_y", "160"),
    ("h_k", "3"),
    ("w_k", "3"),
    ("h_x", "120"),
    ("w_x", "160"),
    ("r_list", "1,2,4,8,16,32,40,80,160"),
    // verify-prop1
    ("trials", "1000"),
    ("patch", "8"),
    ("trial_kind", "dc"),
    // snr-probe / dc-ratio
    ("checkpoint", ""),
    ("probe_r", "1,2,4"),
    ("probe_batch", "64"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|&(k, v)| (k, v.to_string())).collect(),
        }
    }
}

fn split_assignment(line: &str) -> Result<(&str, &str)> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key = value, got {line:?}")))?;
    Ok((k.trim(), v.trim()))
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some(&(k, _)) = DEFAULTS.iter().find(|(k, _)| *k == key) else {
            return config_err(format!("unknown key {key:?}"));
        };
        self.values.insert(k, value.to_string());
        Ok(())
    }

    /// Parses a config file body; later assignments win.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_assignment(line)?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = split_assignment(kv)?;
        self.set(k, v)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("key {key:?} missing from defaults"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("{key} = {raw:?} is not a valid value")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{key} entry {s:?} is not a valid value")))
            })
            .collect()
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    /// Every effective key in declaration order, one `key = value` per line.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (k, _) in DEFAULTS {
            let _ = writeln!(out, "{k} = {}", self.values[k]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_with_comments_and_overrides() {
        let mut cfg = Config::parse("# header\nmode = filtered  # inline\n\nr=4\n").unwrap();
        assert_eq!(cfg.raw("mode"), "filtered");
        assert_eq!(cfg.get::<usize>("r").unwrap(), 4);
        cfg.apply_override("r=8").unwrap();
        assert_eq!(cfg.get::<usize>("r").unwrap(), 8);
        assert_eq!(cfg.list::<u64>("probe_r").unwrap(), vec![1, 2, 4]);
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        assert!(matches!(Config::parse("colour = red"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("mode filtered"), Err(Error::Config(_))));
        let cfg = Config::parse("r = two").unwrap();
        assert!(cfg.get::<usize>("r").is_err());
    }

    #[test]
    fn resolved_lists_every_key() {
        let text = Config::default().resolved();
        assert_eq!(text.lines().count(), DEFAULTS.len());
        assert!(text.contains("momentum = 0.9\n"));
        let round = Config::parse(&text).unwrap();
        assert_eq!(round, Config::default());
    }
}
