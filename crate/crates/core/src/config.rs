//! Run configuration: a TOML file whose values command-line flags override.
//!
//! ```toml
//! seed = 7
//! expansion = 5
//!
//! [paths]
//! vocab = "data/vocab.txt"
//! corpus = "data/corpus.jsonl"
//!
//! [vq]
//! n_codes = 300
//!
//! [topic]
//! n_topics = 20
//! ```
//!
//! Missing keys take their defaults; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::seq::ArConfig;
use crate::topic::TopicConfig;
use crate::vq::VqConfig;

pub const DEFAULT_EXPANSION: usize = 5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub vocab: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// `TVQM` file.
    pub vq: Option<PathBuf>,
    /// `TVQT` file.
    pub model: Option<PathBuf>,
    /// Encoded bag-of-words dataset.
    pub data: Option<PathBuf>,
    /// `TVQA` file.
    pub ar: Option<PathBuf>,
    pub sequences: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub expansion: usize,
    pub paths: Paths,
    pub vq: VqConfig,
    pub topic: TopicConfig,
    pub ar: ArConfig,
    pub metrics: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            expansion: DEFAULT_EXPANSION,
            paths: Paths::default(),
            vq: VqConfig::default(),
            topic: TopicConfig::default(),
            ar: ArConfig::default(),
            metrics: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::format(origin, line, e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Copies the run seed into every component config.
    pub fn resolve_seed(&mut self) {
        if let Some(s) = self.seed {
            self.vq.seed = s;
            self.topic.seed = s;
            self.ar.seed = s;
        }
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

/// Path stored under `flag`, or a usage error naming the flag.
pub fn required<'a>(flag: &str, path: &'a Option<PathBuf>) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::input(format!("missing required path --{flag}")))
}

/// `required` plus a check that the file exists.
pub fn existing<'a>(flag: &str, path: &'a Option<PathBuf>) -> Result<&'a Path> {
    let p = required(flag, path)?;
    if !p.is_file() {
        return Err(Error::input(format!("--{flag}: {} does not exist", p.display())));
    }
    Ok(p)
}

/// `required` plus a check that the parent directory exists.
pub fn writable<'a>(flag: &str, path: &'a Option<PathBuf>) -> Result<&'a Path> {
    let p = required(flag, path)?;
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() && !d.is_dir() => Err(Error::input(format!(
            "--{flag}: directory {} does not exist",
            d.display()
        ))),
        _ => Ok(p),
    }
}
