//! TOML run configuration shared by the command-line subcommands.
//!
//! Every table rejects unknown keys. Missing keys take the defaults of the
//! structs they fill, so an empty file is a valid config.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::ProbeConfig;
use crate::fsio;
use crate::promptgen::Vocabulary;
use crate::trainer::TrainConfig;

/// Optional replacements for the built-in vocabulary lists. Relative paths
/// are resolved against the directory of the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabPaths {
    pub adjectives: Option<PathBuf>,
    pub styles: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
}

impl VocabPaths {
    pub fn load(&self) -> Result<Vocabulary> {
        Vocabulary::from_files(
            self.styles.as_deref(),
            self.adjectives.as_deref(),
            self.synonyms.as_deref(),
        )
    }

    fn rebase(&mut self, dir: &Path) {
        for p in [&mut self.adjectives, &mut self.styles, &mut self.synonyms]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Pass class-text anchors through the network as well as the images.
    pub apply_to_text: bool,
    /// Name written into the report's `dataset` column.
    pub dataset: String,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            apply_to_text: true,
            dataset: "dataset".into(),
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub eval: EvalConfig,
    pub train: TrainConfig,
    pub vocab: VocabPaths,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = parse_toml(text)?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = load_toml(path)?;
        cfg.train.validate()?;
        if let Some(dir) = path.parent() {
            cfg.vocab.rebase(dir);
        }
        Ok(cfg)
    }

    /// The config with every default spelled out.
    pub fn to_toml_string(&self) -> String {
        to_toml(self)
    }
}

pub fn to_toml<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("config serializes")
}

pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fsio::read_all(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| Error::Config(format!("{}: not UTF-8", path.display())))?;
    parse_toml(text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causalsim::SynthRunConfig;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn nested_tables() {
        let cfg = RunConfig::from_toml_str(
            "[train]\ntau = 0.5\nseeds = [7]\n[train.adam]\nlr = 0.01\n[train.net]\nn_blocks = 2\n\
             [eval]\napply_to_text = false\n[eval.probe]\nmax_epochs = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.train.tau, 0.5);
        assert_eq!(cfg.train.seeds, vec![7]);
        assert_eq!(cfg.train.adam.lr, 0.01);
        assert_eq!(cfg.train.adam.beta1, 0.9);
        assert_eq!(cfg.train.net.n_blocks, 2);
        assert!(!cfg.eval.apply_to_text);
        assert_eq!(cfg.eval.probe.max_epochs, 3);
        assert_eq!(cfg.eval.probe.batch_size, 128);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in ["bogus = 1", "[train]\ntaux = 0.1", "[train.adam]\nlearning_rate = 1.0", "[vocab]\ncolours = \"x\""] {
            let err = RunConfig::from_toml_str(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml_str("[train]\ntau = 0.0").is_err());
        assert!(RunConfig::from_toml_str("[train]\ntau = \"hot\"").is_err());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let text = RunConfig::default().to_toml_string();
        assert!(text.contains("tau = 0.1"));
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn relative_vocab_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[vocab]\nstyles = \"s.json\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.vocab.styles.unwrap(), dir.path().join("s.json"));
        assert!(matches!(RunConfig::load(&dir.path().join("missing.toml")), Err(Error::Io { .. })));
    }

    #[test]
    fn synth_config_parses() {
        let cfg: SynthRunConfig = parse_toml("batch_classes = 64\n[causal]\nn_samples = 500\n[train]\ntau = 0.2\n").unwrap();
        assert_eq!(cfg.batch_classes, 64);
        assert_eq!(cfg.causal.n_samples, 500);
        assert_eq!(cfg.causal.d, 16);
        assert_eq!(cfg.train.tau, 0.2);
        assert!(parse_toml::<SynthRunConfig>("[causal]\nnc = 4").is_err());
    }
}
