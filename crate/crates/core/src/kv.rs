//! Flat `key = value` configuration text.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed key/value pairs. `#` starts a comment; blank lines are skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Parse(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    /// Parses `key` into `slot` if present.
    pub fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.entries.remove(key) {
            *slot = v
                .parse()
                .map_err(|e| Error::Parse(format!("`{key} = {v}`: {e}")))?;
        }
        Ok(())
    }

    /// Comma-separated list.
    pub fn set_list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.entries.remove(key) {
            *slot = parse_list(&v).map_err(|e| Error::Parse(format!("`{key} = {v}`: {e}")))?;
        }
        Ok(())
    }

    /// Errors on any key no `set` call consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            Some(k) => Err(Error::Parse(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

pub fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|e: T::Err| format!("`{p}`: {e}")))
        .collect()
}

pub fn join_list<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_consume() {
        let mut kv = KvFile::parse("# header\na = 3\n b=0.5 # trailing\n\nlist = 1, 2,3\n").unwrap();
        let (mut a, mut b, mut l) = (0usize, 0.0f64, Vec::<u32>::new());
        kv.set("a", &mut a).unwrap();
        kv.set("b", &mut b).unwrap();
        kv.set_list("list", &mut l).unwrap();
        kv.finish().unwrap();
        assert_eq!((a, b, l), (3, 0.5, vec![1, 2, 3]));
    }

    #[test]
    fn errors() {
        assert!(KvFile::parse("novalue").is_err());
        assert!(KvFile::parse("a = 1\na = 2").is_err());
        let mut kv = KvFile::parse("a = x").unwrap();
        assert!(kv.set("a", &mut 0usize).is_err());
        let kv = KvFile::parse("zzz = 1").unwrap();
        assert!(kv.finish().unwrap_err().to_string().contains("zzz"));
    }
}
