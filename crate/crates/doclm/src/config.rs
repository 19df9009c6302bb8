//! Run configuration: one TOML file covering model, training, and data
//! paths, with a flat set of command-line overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("configuration invalid:\n{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitPaths {
    pub classification: Option<PathBuf>,
    pub extraction: Option<PathBuf>,
    pub docqa: Option<PathBuf>,
    pub instructions: Option<PathBuf>,
}

impl SplitPaths {
    pub fn is_empty(&self) -> bool {
        self.classification.is_none()
            && self.extraction.is_none()
            && self.docqa.is_none()
            && self.instructions.is_none()
    }

    fn fields(&self) -> [(&'static str, Option<&PathBuf>); 4] {
        [
            ("classification", self.classification.as_ref()),
            ("extraction", self.extraction.as_ref()),
            ("docqa", self.docqa.as_ref()),
            ("instructions", self.instructions.as_ref()),
        ]
    }

    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.classification,
            &mut self.extraction,
            &mut self.docqa,
            &mut self.instructions,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub train: SplitPaths,
    pub val: Option<SplitPaths>,
    pub test: Option<SplitPaths>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub data: DataPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/out"),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
            data: DataPaths::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML config; relative data paths and out_dir resolve against
    /// the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if let Some(base) = path.parent() {
            if cfg.out_dir.is_relative() {
                cfg.out_dir = base.join(&cfg.out_dir);
            }
            cfg.data.train.rebase(base);
            if let Some(v) = &mut cfg.data.val {
                v.rebase(base);
            }
            if let Some(t) = &mut cfg.data.test {
                t.rebase(base);
            }
        }
        Ok(cfg)
    }

    pub fn emit(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Collects every validation failure at once: model shape constraints and
    /// data paths that do not exist.
    pub fn validate(&self, need_train_data: bool) -> Result<(), ConfigError> {
        let mut problems = String::new();
        let mut push = |msg: String| {
            let _ = writeln!(problems, "  - {msg}");
        };
        if let Err(e) = self.encoder.validate() {
            push(e.to_string());
        }
        if let Err(e) = self.decoder.validate() {
            push(e.to_string());
        }
        if let Err(e) = self.train.validate() {
            push(e.to_string());
        }
        if self.encoder.max_seq + 2 > self.decoder.max_context {
            push(format!(
                "decoder max_context {} leaves no room after the {} feature slots",
                self.decoder.max_context, self.encoder.max_seq
            ));
        }
        if need_train_data && self.data.train.is_empty() {
            push("data.train names no dataset files".into());
        }
        let mut check_split = |name: &str, split: &SplitPaths| {
            for (field, p) in split.fields() {
                if let Some(p) = p {
                    if !p.exists() {
                        push(format!("data.{name}.{field}: no such file {}", p.display()));
                    }
                }
            }
        };
        check_split("train", &self.data.train);
        if let Some(v) = &self.data.val {
            check_split("val", v);
        }
        if let Some(t) = &self.data.test {
            check_split("test", t);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(
                problems.trim_end_matches('\n').to_string(),
            ))
        }
    }

    pub fn split(&self, name: &str) -> Option<&SplitPaths> {
        match name {
            "train" => Some(&self.data.train),
            "val" => self.data.val.as_ref(),
            "test" => self.data.test.as_ref(),
            _ => None,
        }
    }
}
