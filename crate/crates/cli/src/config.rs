//! Flat `key = value` configuration with `train.`, `bench.` and `fwm.`
//! sections. Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

pub const SECTIONS: [&str; 3] = ["train", "bench", "fwm"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key=value", n + 1))?;
            let key = key.trim();
            match key.split_once('.') {
                Some((section, rest)) if SECTIONS.contains(&section) && !rest.is_empty() => {}
                _ => bail!("line {}: key {key:?} lacks a train./bench./fwm. prefix", n + 1),
            }
            if values.insert(key.to_string(), value.trim().to_string()).is_some() {
                bail!("line {}: duplicate key {key:?}", n + 1);
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    /// `flag` when given, else the config value, else `default`.
    pub fn pick<T>(&self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.raw(key) {
            Some(s) => s.parse().map_err(|e| anyhow!("config key {key}: {e}")),
            None => Ok(default),
        }
    }

    pub fn flag(&self, key: &str, flag: bool) -> Result<bool> {
        if flag {
            return Ok(true);
        }
        match self.raw(key) {
            None => Ok(false),
            Some("on" | "true" | "1" | "yes") => Ok(true),
            Some("off" | "false" | "0" | "no") => Ok(false),
            Some(other) => bail!("config key {key}: {other:?} is not a boolean"),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let c = Config::parse("# comment\ntrain.lr = 1e-3\n\nfwm.inference=on  # trailing\nbench.seed=4\n").unwrap();
        assert_eq!(c.pick::<f64>("train.lr", None, 0.0).unwrap(), 1e-3);
        assert_eq!(c.pick::<f64>("train.lr", Some(5.0), 0.0).unwrap(), 5.0);
        assert_eq!(c.pick::<u64>("train.seed", None, 9).unwrap(), 9);
        assert!(c.flag("fwm.inference", false).unwrap());
        assert!(!c.flag("fwm.other", false).unwrap());
        assert_eq!(c.keys().count(), 3);
    }

    #[test]
    fn rejects_malformed() {
        for bad in ["lr=1", "train.lr", "other.x=1", "train.=3", "train.a=1\ntrain.a=2"] {
            assert!(Config::parse(bad).is_err(), "{bad}");
        }
        let c = Config::parse("train.lr=fast").unwrap();
        assert!(c.pick::<f64>("train.lr", None, 0.0).is_err());
        assert!(Config::parse("fwm.inference=maybe").unwrap().flag("fwm.inference", false).is_err());
    }
}
