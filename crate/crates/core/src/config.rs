//! Plain-text experiment configuration.
//!
//! Grammar:
//!
//! ```text
//! file    := line*
//! line    := blank | comment | section | entry
//! comment := '#' anything            (also allowed after a value)
//! section := '[' name ']'
//! entry   := key '=' value
//! value   := item (',' item)*        (lists are comma separated)
//! ```
//!
//! Keys are unique within a section and every entry belongs to a section.
//! Names and keys are `[A-Za-z0-9_-]+`; surrounding whitespace is ignored.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ConfigFile::default();
        let mut current: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            let lineno = n + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {lineno}: unterminated section header")))?
                    .trim();
                if !valid_name(name) {
                    return Err(Error::Config(format!("line {lineno}: bad section name `{name}`")));
                }
                cfg.sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {lineno}: expected `key = value`")))?;
            let key = key.trim();
            if !valid_name(key) {
                return Err(Error::Config(format!("line {lineno}: bad key `{key}`")));
            }
            let section = current
                .as_ref()
                .ok_or_else(|| Error::Config(format!("line {lineno}: entry before any section")))?;
            let entries = cfg.sections.get_mut(section).expect("section created on header");
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {lineno}: duplicate key `{section}.{key}`")));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    pub fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn keys(&self, section: &str) -> Vec<&str> {
        self.sections
            .get(section)
            .map(|s| s.keys().map(String::as_str).collect())
            .unwrap_or_default()
    }

    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.raw(section, key)
            .map(|v| parse_item(v, section, key))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(section, key)?.unwrap_or(default))
    }

    pub fn list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some(v) = self.raw(section, key) else {
            return Ok(None);
        };
        let items = v
            .split(',')
            .map(|s| parse_item(s, section, key))
            .collect::<Result<Vec<T>>>()?;
        if items.is_empty() {
            return Err(Error::Config(format!("`{section}.{key}` is an empty list")));
        }
        Ok(Some(items))
    }

    pub fn list_or<T: FromStr>(&self, section: &str, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        Ok(self.list(section, key)?.unwrap_or(default))
    }

    /// Fails on any key of `section` not in `allowed`, catching typos.
    pub fn check_keys(&self, section: &str, allowed: &[&str]) -> Result<()> {
        for k in self.keys(section) {
            if !allowed.contains(&k) {
                return Err(Error::Config(format!("unknown key `{section}.{k}`")));
            }
        }
        Ok(())
    }

    pub fn section_names(&self) -> Vec<&str> {
        self.sections.keys().map(String::as_str).collect()
    }
}

fn parse_item<T: FromStr>(s: &str, section: &str, key: &str) -> Result<T>
where
    T::Err: Display,
{
    let s = s.trim();
    if s.is_empty() {
        return Err(Error::Config(format!("`{section}.{key}` has an empty item")));
    }
    s.parse()
        .map_err(|e| Error::Config(format!("`{section}.{key}`: cannot parse `{s}`: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "
# top comment
[experiment]
name = lr-transfer   # trailing comment
seeds = 0, 1 ,2

[model]
widths = 32,128
nonlinearity = scaled-relu
";

    #[test]
    fn parses_sections_lists_and_comments() {
        let c = ConfigFile::parse(SAMPLE).unwrap();
        assert_eq!(c.raw("experiment", "name"), Some("lr-transfer"));
        assert_eq!(c.list::<u64>("experiment", "seeds").unwrap(), Some(vec![0, 1, 2]));
        assert_eq!(c.list::<usize>("model", "widths").unwrap(), Some(vec![32, 128]));
        assert_eq!(c.get::<f64>("model", "missing").unwrap(), None);
        assert_eq!(c.get_or("model", "depth", 3usize).unwrap(), 3);
        assert_eq!(c.section_names(), vec!["experiment", "model"]);
        assert!(c.check_keys("model", &["widths", "nonlinearity"]).is_ok());
        assert!(c.check_keys("model", &["widths"]).is_err());
    }

    #[test]
    fn rejects_malformed_input() {
        for bad in [
            "key = 1",
            "[open\nk = 1",
            "[s]\nno equals sign",
            "[s]\nk = 1\nk = 2",
            "[bad name]",
            "[s]\nbad key = 1",
        ] {
            assert!(matches!(ConfigFile::parse(bad), Err(Error::Config(_))), "{bad}");
        }
        let c = ConfigFile::parse("[s]\nxs = 1,,2\ny = abc").unwrap();
        assert!(c.list::<u32>("s", "xs").is_err());
        assert!(c.get::<f64>("s", "y").is_err());
    }
}
