//! `key = value` configuration files merged with command-line flags.
//!
//! Resolution order for every setting: explicit flag, then config-file
//! entry, then built-in default. Whatever a command resolves is recorded so
//! `--print-config` can dump the exact configuration a run would use.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use storyline::{Error, Result};

/// Every key a configuration file may define, across all subcommands. A key
/// the current subcommand does not use is simply ignored, so one file can
/// drive a whole synthesize/train/evaluate workflow.
pub const KNOWN_KEYS: &[&str] = &[
    "ablation",
    "alpha",
    "batch_size",
    "beam",
    "beta",
    "checkpoint",
    "checkpoint_every",
    "corpus",
    "decoder_hidden",
    "epochs",
    "eval_stories",
    "feature_dim",
    "features",
    "grad_clip",
    "hidden_dim",
    "hide_policy",
    "inner_dim",
    "lr",
    "max_len",
    "meta",
    "out",
    "precision",
    "resume",
    "scheduled_sampling",
    "seed",
    "sigma",
    "slots",
    "smooth_bleu",
    "stories",
    "topics",
    "vocab",
];

/// Parsed config file plus the record of every resolved setting.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Settings {
    /// Load and validate a config file; `None` yields empty settings.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = std::fs::read_to_string(path)?;
        let mut file = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |reason: &str| Error::Format {
                path: path.display().to_string(),
                reason: format!("line {}: {reason}", lineno + 1),
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fail("expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            if !KNOWN_KEYS.contains(&key) {
                return Err(fail(&format!("unknown key {key:?}")));
            }
            if value.is_empty() {
                return Err(fail(&format!("key {key:?} has an empty value")));
            }
            if file.insert(key.to_string(), value.to_string()).is_some() {
                return Err(fail(&format!("key {key:?} defined twice")));
            }
        }
        Ok(Settings {
            file,
            resolved: BTreeMap::new(),
        })
    }

    fn record(&mut self, key: &str, value: impl Display) {
        self.resolved.insert(key.to_string(), value.to_string());
    }

    fn parse_file<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.file.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("config key {key}: cannot parse {raw:?}"))),
        }
    }

    /// Optional setting with no default.
    pub fn get_opt<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<Option<T>> {
        let value = match flag {
            Some(v) => Some(v),
            None => self.parse_file(key)?,
        };
        if let Some(v) = &value {
            self.record(key, v);
        }
        Ok(value)
    }

    /// Setting with a default used when neither flag nor file define it.
    pub fn get<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T> {
        let value = self.get_opt(key, flag)?.unwrap_or(default);
        self.record(key, &value);
        Ok(value)
    }

    /// Optional path setting ([`PathBuf`] has no `Display`, so paths get
    /// their own accessors).
    pub fn get_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
        let value = match flag {
            Some(v) => Some(v),
            None => self.file.get(key).map(PathBuf::from),
        };
        if let Some(v) = &value {
            self.record(key, v.display());
        }
        Ok(value)
    }

    /// Path setting with a default.
    pub fn get_path_or(
        &mut self,
        key: &str,
        flag: Option<PathBuf>,
        default: &str,
    ) -> Result<PathBuf> {
        let value = self
            .get_path(key, flag)?
            .unwrap_or_else(|| PathBuf::from(default));
        self.record(key, value.display());
        Ok(value)
    }

    /// Mandatory path setting.
    pub fn require_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        self.get_path(key, flag)?.ok_or_else(|| {
            Error::Config(format!(
                "missing required setting {key} (flag --{} or config key {key})",
                key.replace('_', "-")
            ))
        })
    }

    /// Dump every resolved setting as `key = value` lines.
    pub fn print_resolved(&self) {
        for (key, value) in &self.resolved {
            println!("{key} = {value}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(content: &str) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn flags_override_file_which_overrides_default() {
        let f = write("epochs = 40\nseed = 9 # trailing comment\n\n# full-line comment\n");
        let mut s = Settings::load(Some(f.path())).unwrap();
        assert_eq!(s.get("epochs", Some(7usize), 1).unwrap(), 7);
        assert_eq!(s.get("seed", None::<u64>, 0).unwrap(), 9);
        assert_eq!(s.get("beam", None::<usize>, 3).unwrap(), 3);
        assert_eq!(s.get_opt("epochs", None::<usize>).unwrap(), Some(40));
        assert!(s.require_path("corpus", None).is_err());
    }

    #[test]
    fn malformed_files_are_rejected() {
        for bad in [
            "stories 12",         // no separator
            "mystery = 3",        // unknown key
            "epochs =",           // empty value
            "seed = 1\nseed = 2", // duplicate
        ] {
            let f = write(bad);
            let err = Settings::load(Some(f.path())).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "{bad:?} gave {err:?}");
        }
        let f = write("epochs = soon");
        let mut s = Settings::load(Some(f.path())).unwrap();
        assert!(s.get("epochs", None::<usize>, 1).is_err());
    }
}
