//! Line-oriented `key = value` files.
//!
//! `#` starts a comment, blank lines are ignored, keys may appear once.
//! Consumers pull the keys they know; whatever is left over is reported as
//! unknown together with its line number.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KvFile {
    origin: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl KvFile {
    pub fn parse(origin: &str, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(err("empty key".into()));
            }
            if entries.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
                return Err(err(format!("duplicate key `{k}`")));
            }
        }
        Ok(Self {
            origin: origin.to_string(),
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&path.display().to_string(), &text)
    }

    /// Removes and parses `key` if present.
    pub fn take<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse::<T>().map(Some).map_err(|e| Error::Parse {
                path: self.origin.clone(),
                line,
                msg: format!("{key}: {e}"),
            }),
        }
    }

    /// Comma-separated list.
    pub fn take_list<T>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<T>().map_err(|e| Error::Parse {
                        path: self.origin.clone(),
                        line,
                        msg: format!("{key}: {e}"),
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Errors on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().min_by_key(|(_, (line, _))| *line) {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Parse {
                path: self.origin,
                line,
                msg: format!("unknown key `{k}`"),
            }),
        }
    }
}

/// Renders `key = value` lines.
pub fn render(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_take_finish() {
        let mut kv = KvFile::parse("t", "# comment\n\na = 3\nb = x, y # trailing\n").unwrap();
        assert_eq!(kv.take::<u32>("a").unwrap(), Some(3));
        assert_eq!(
            kv.take_list::<String>("b").unwrap(),
            Some(vec!["x".to_string(), "y".to_string()])
        );
        assert_eq!(kv.take::<u32>("missing").unwrap(), None);
        kv.finish().unwrap();
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = KvFile::parse("f.cfg", "a = 1\nnot a pair\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = KvFile::parse("f.cfg", "a = 1\na = 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let kv = KvFile::parse("f.cfg", "a = 1\n\nzzz = 2\n").unwrap();
        let mut kv2 = kv.clone();
        kv2.take::<u32>("a").unwrap();
        assert!(matches!(kv2.finish(), Err(Error::Parse { line: 3, .. })));
        let mut kv = KvFile::parse("f.cfg", "a = nope\n").unwrap();
        assert!(matches!(kv.take::<u32>("a"), Err(Error::Parse { line: 1, .. })));
    }
}
