//! Configuration resolution: command-line flags override a key=value file,
//! which overrides built-in defaults. Every key the file supplies must be
//! consumed by the command, and the fully resolved configuration is echoed
//! into the run directory so any result can be traced to its inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use aura_core::dataset::format;
use aura_core::{Error, Result};

pub struct Resolver {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    resolved: BTreeMap<String, String>,
}

impl Resolver {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => format::read_kv(p)?,
            None => BTreeMap::new(),
        };
        Ok(Self {
            file,
            used: BTreeSet::new(),
            resolved: BTreeMap::new(),
        })
    }

    fn from_file<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        self.used.insert(key.to_string());
        match self.file.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                Error::Config(format!("config key {key:?} has unparseable value {raw:?}"))
            }),
        }
    }

    /// Flag beats file beats default. The winning value is recorded for the
    /// config echo.
    pub fn resolve<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T> {
        let from_file = self.from_file(key)?;
        let value = flag.or(from_file).unwrap_or(default);
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Like [`Self::resolve`] but without a default; `None` means the field
    /// was not given anywhere.
    pub fn resolve_opt<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<Option<T>> {
        let value = flag.or(self.from_file(key)?);
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    /// A required field: the command fails up front when neither the flag
    /// nor the file provides it.
    pub fn require<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        self.resolve_opt(key, flag)?
            .ok_or_else(|| Error::Config(format!("missing required field {key:?}")))
    }

    /// Records a value that has no file counterpart (e.g. the command name)
    /// so it still appears in the echo.
    pub fn note(&mut self, key: &str, value: impl Display) {
        self.resolved.insert(key.to_string(), value.to_string());
    }

    /// Rejects config-file keys no command field consumed; a typo in the
    /// file should fail loudly, not silently fall back to a default.
    pub fn finish(&self) -> Result<()> {
        for key in self.file.keys() {
            if !self.used.contains(key) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
        }
        Ok(())
    }

    /// Writes the resolved configuration as sorted key=value lines.
    pub fn echo(&self, path: &Path) -> Result<()> {
        format::write_kv(path, &self.resolved)
    }
}

/// Comma-separated positive integers, for channel lists and k lists.
pub fn parse_usize_list(raw: &str, what: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in raw.split(',') {
        let v: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad {what} entry {part:?}")))?;
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{what} list is empty")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv_file(content: &str) -> std::path::PathBuf {
        let path = std::env::temp_dir().join(format!(
            "aura-cli-config-{}-{}.txt",
            std::process::id(),
            content.len()
        ));
        std::fs::write(&path, content).unwrap();
        path
    }

    #[test]
    fn precedence_is_flag_file_default() {
        let path = kv_file("epochs=7\nlr=0.5\n");
        let mut r = Resolver::load(Some(&path)).unwrap();
        assert_eq!(r.resolve("epochs", Some(3usize), 1).unwrap(), 3);
        assert_eq!(r.resolve("lr", None::<f64>, 0.1).unwrap(), 0.5);
        assert_eq!(r.resolve("seed", None::<u64>, 42).unwrap(), 42);
        r.finish().unwrap();
        assert_eq!(r.resolved["epochs"], "3");
        assert_eq!(r.resolved["lr"], "0.5");
        assert_eq!(r.resolved["seed"], "42");
        std::fs::remove_file(path).unwrap();
    }

    #[test]
    fn unknown_and_unparseable_keys_fail() {
        let path = kv_file("epochs=7\nmystery=1\n");
        let mut r = Resolver::load(Some(&path)).unwrap();
        r.resolve("epochs", None::<usize>, 1).unwrap();
        assert!(matches!(r.finish(), Err(Error::Config(_))));
        std::fs::remove_file(path).unwrap();

        let path = kv_file("epochs=soon\n");
        let mut r = Resolver::load(Some(&path)).unwrap();
        assert!(matches!(
            r.resolve("epochs", None::<usize>, 1),
            Err(Error::Config(_))
        ));
        std::fs::remove_file(path).unwrap();
    }

    #[test]
    fn required_fields_and_lists() {
        let mut r = Resolver::load(None).unwrap();
        assert!(matches!(
            r.require::<String>("pair", None),
            Err(Error::Config(_))
        ));
        assert_eq!(
            r.require("pair", Some("text-imu".to_string())).unwrap(),
            "text-imu"
        );
        assert_eq!(parse_usize_list("1, 10,50", "ks").unwrap(), vec![1, 10, 50]);
        assert!(parse_usize_list("1,x", "ks").is_err());
    }
}
