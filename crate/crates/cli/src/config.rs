//! TOML configuration with `--set section.key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use protomail_core::corpus::SplitRatios;
use protomail_core::edits::{EditPosition, Lexicons, SuggestOptions, DEFAULT_TOPIC_THRESHOLD, EDIT_IG_STEPS};
use protomail_core::model::ModelConfig;
use protomail_core::training::{Hyperparams, SearchSpace};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: Hyperparams,
    pub edits: EditsConfig,
    pub search: SearchConfig,
    pub ablation: AblationConfig,
    pub service: ServiceConfig,
    /// Worker threads; all cores when unset.
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Short corpus name used in reports.
    pub name: String,
    /// Generic line-delimited corpus.
    pub corpus: Option<PathBuf>,
    /// CoNLL-U parse file for the corpus.
    pub parses: Option<PathBuf>,
    /// Offline organization-interests table (JSON object of lists).
    pub enrichment: Option<PathBuf>,
    /// Replays a stored split instead of sampling one.
    pub manifest: Option<PathBuf>,
    pub seed: u64,
    pub ratios: SplitRatios,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            name: "corpus".into(),
            corpus: None,
            parses: None,
            enrichment: None,
            manifest: None,
            seed: 0,
            ratios: SplitRatios::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditsConfig {
    pub topic_threshold: f64,
    pub ig_steps: usize,
    /// Greeting word list, one entry per line; built-in list when unset.
    pub greetings: Option<PathBuf>,
    pub signoffs: Option<PathBuf>,
    pub positions: Vec<EditPosition>,
    pub seeds: Vec<u64>,
}

impl Default for EditsConfig {
    fn default() -> Self {
        Self {
            topic_threshold: DEFAULT_TOPIC_THRESHOLD,
            ig_steps: EDIT_IG_STEPS,
            greetings: None,
            signoffs: None,
            positions: EditPosition::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl EditsConfig {
    pub fn lexicons(&self) -> Result<Lexicons> {
        let mut lex = Lexicons::default();
        if let Some(p) = &self.greetings {
            let text = fs::read_to_string(p).with_context(|| format!("reading greetings {}", p.display()))?;
            lex.greetings = Lexicons::from_lists(&text, "").greetings;
        }
        if let Some(p) = &self.signoffs {
            let text = fs::read_to_string(p).with_context(|| format!("reading sign-offs {}", p.display()))?;
            lex.signoffs = Lexicons::from_lists("", &text).signoffs;
        }
        Ok(lex)
    }

    pub fn suggest_options(&self, seed: u64) -> Result<SuggestOptions> {
        Ok(SuggestOptions {
            topic_threshold: self.topic_threshold,
            seed,
            ig_steps: self.ig_steps,
            require_negative: false,
            lexicons: self.lexicons()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub budget: usize,
    pub seed: u64,
    pub space: SearchSpace,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            budget: 10,
            seed: 0,
            space: SearchSpace::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Restrict the grid to these configuration names; all when empty.
    pub only: Vec<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            only: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub default_top_n: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            default_top_n: 3,
        }
    }
}

/// Sets `path` (dot-separated) in a TOML table. The value is read as a
/// TOML literal when possible and as a bare string otherwise.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let Some((path, raw)) = assignment.split_once('=') else {
        bail!("override {assignment:?} is not of the form key=value");
    };
    let value = parse_literal(raw.trim());
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override key {path:?} has an empty segment");
    }
    let (last, parents) = keys.split_last().expect("non-empty key");
    let mut table = root;
    for k in parents {
        let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .with_context(|| format!("override {path:?}: {k} is not a table"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl Config {
    /// Reads `path` (or defaults when `None`) and applies overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?
                .parse::<toml::Table>()
                .with_context(|| format!("parsing config {}", p.display()))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = toml::Value::Table(table).try_into().context("invalid configuration")?;
        cfg.model.validate()?;
        cfg.training.validate()?;
        Ok(cfg)
    }

    /// Model configuration with the training prototype counts and fusion
    /// weights applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        self.training.apply(&mut m);
        m
    }

    pub fn threads(&self) -> usize {
        self.threads.unwrap_or_else(protomail_core::model::default_threads).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_create_nested_keys() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "training.epochs=0").unwrap();
        apply_override(&mut t, "data.name=enron").unwrap();
        apply_override(&mut t, "model.encoder.d=8").unwrap();
        let cfg: Config = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(cfg.training.epochs, 0);
        assert_eq!(cfg.data.name, "enron");
        assert_eq!(cfg.model.encoder.d, 8);
        assert!(apply_override(&mut toml::Table::new(), "nokey").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let t: toml::Table = "[training]\nepochz = 3".parse().unwrap();
        assert!(toml::Value::Table(t).try_into::<Config>().is_err());
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let text = toml::to_string(&Config::default()).unwrap();
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(back, Config::default());
    }
}
