use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Keys accepted in a run configuration file.
pub const KNOWN_KEYS: &[&str] = &[
    "arch",
    "res",
    "grids",
    "blocks",
    "channels",
    "heads",
    "n_iter",
    "phantom_mode",
    "lr",
    "wd",
    "steps",
    "batch",
    "seed",
    "drop_path",
    "n_classes",
    "pos_embed",
    "ffn_shortcut",
    "optimizer",
    "clip",
];

/// A parsed `key = value` file. Blank lines and `#` comments are ignored;
/// unknown or repeated keys are errors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, (usize, String)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!("line {line_no}: expected `key = value`, got `{line}`")));
            };
            let (key, value) = (key.trim(), value.trim());
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::config(format!(
                    "line {line_no}: unknown key `{key}` (known: {})",
                    KNOWN_KEYS.join(", ")
                )));
            }
            if value.is_empty() {
                return Err(Error::config(format!("line {line_no}: empty value for `{key}`")));
            }
            if entries.insert(key.to_string(), (line_no, value.to_string())).is_some() {
                return Err(Error::config(format!("line {line_no}: `{key}` given twice")));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    /// Parsed value of `key`, if present.
    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        let Some((line, value)) = self.entries.get(key) else {
            return Ok(None);
        };
        value.parse().map(Some).map_err(|_| Error::config(format!("line {line}: cannot parse `{value}` for `{key}`")))
    }

    /// Comma-separated list value of `key`, if present.
    pub fn list<V: FromStr>(&self, key: &str) -> Result<Option<Vec<V>>> {
        let Some((line, value)) = self.entries.get(key) else {
            return Ok(None);
        };
        value
            .split(',')
            .map(|item| {
                item.trim()
                    .parse()
                    .map_err(|_| Error::config(format!("line {line}: cannot parse `{}` in `{key}`", item.trim())))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_lists_and_comments() {
        let cfg = ConfigFile::parse("# run\narch = tiny\nlr=0.001  # inline\n\ngrids = 4, 2,1,1\n").unwrap();
        assert_eq!(cfg.raw("arch"), Some("tiny"));
        assert_eq!(cfg.get::<f64>("lr").unwrap(), Some(0.001));
        assert_eq!(cfg.list::<usize>("grids").unwrap(), Some(vec![4, 2, 1, 1]));
        assert_eq!(cfg.get::<usize>("steps").unwrap(), None);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed_lines() {
        assert!(ConfigFile::parse("colour = red").is_err());
        assert!(ConfigFile::parse("lr = 1\nlr = 2").is_err());
        assert!(ConfigFile::parse("just words").is_err());
        let cfg = ConfigFile::parse("steps = many").unwrap();
        assert!(matches!(cfg.get::<usize>("steps"), Err(Error::Config(_))));
    }
}
