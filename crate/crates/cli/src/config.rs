//! Run configuration: TOML loading with line-numbered errors, defaults,
//! path resolution, the canonical echo and its hash.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Result;
use cfa_core::encoder::Activation;
use cfa_core::experiment::{DataSource, ExperimentConfig, MaskSpec, Method};
use cfa_core::io::RunStamp;
use cfa_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A problem with the configuration or the command line. Maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()).into())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UfmHeadKind {
    #[default]
    Orthonormal,
    SimplexEtf,
}

/// Problem and solver settings for `ufm solve`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UfmConfig {
    pub num_classes: usize,
    pub num_domains: usize,
    pub dim: usize,
    pub heads: UfmHeadKind,
    pub beta: f64,
    pub lambda: f64,
    pub n_per_cell: usize,
    pub steps: usize,
    pub lr: f64,
    /// Rounds of temperature doubling; 1 means a single solve.
    pub anneal_rounds: usize,
}

impl Default for UfmConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            num_domains: 2,
            dim: 8,
            heads: UfmHeadKind::Orthonormal,
            beta: 20.0,
            lambda: 1.0,
            n_per_cell: 10,
            steps: 200_000,
            lr: 0.1,
            anneal_rounds: 1,
        }
    }
}

/// What the user wrote. Absent keys fall back to library defaults.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seeds: Option<Vec<u64>>,
    out_dir: Option<PathBuf>,
    method: Option<Method>,
    wise_alpha: Option<f64>,
    id_val_ratio: Option<f64>,
    domain_label_ratio: Option<f64>,
    hidden: Option<Vec<usize>>,
    feature_dim: Option<usize>,
    activation: Option<Activation>,
    pretrain_epochs: Option<usize>,
    data: Option<DataSource>,
    mask: Option<MaskSpec>,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    ufm: UfmConfig,
}

/// Fully resolved configuration. Serializing it gives the echo, which loads
/// back to the same value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
    pub ufm: UfmConfig,
}

pub fn default_data() -> DataSource {
    DataSource::Pixel {
        num_classes: 4,
        num_domains: 3,
        side: 8,
        n_per_cell: 500,
        noise: 0.8,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            out_dir: None,
            experiment: ExperimentConfig::new(default_data(), MaskSpec::OnePerClass, Method::Cfa),
            ufm: UfmConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML text. Relative file paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError(format!("config: {e}")))?;
        let d = RunConfig::default();
        let mut exp = ExperimentConfig::new(
            raw.data.unwrap_or(d.experiment.data),
            raw.mask.unwrap_or(d.experiment.mask),
            raw.method.unwrap_or(d.experiment.method),
        );
        let e = &mut exp;
        e.wise_alpha = raw.wise_alpha;
        e.train = raw.train;
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = raw.$f { e.$f = v; } )* };
        }
        take!(id_val_ratio, domain_label_ratio, hidden, feature_dim, activation, pretrain_epochs);
        let mut cfg = RunConfig {
            seeds: raw.seeds.unwrap_or(d.seeds),
            out_dir: raw.out_dir,
            experiment: exp,
            ufm: raw.ufm,
        };
        cfg.resolve_paths(base_dir)?;
        cfg.validate().map_err(|err| ConfigError(locate(text, &err.to_string())))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
    }

    /// The given file, or all defaults when there is none.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    fn resolve_paths(&mut self, base: &Path) -> Result<()> {
        let fix = |p: &mut PathBuf, what: &str| -> Result<()> {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.is_file() {
                return config_err(format!("{what} file {} does not exist", p.display()));
            }
            Ok(())
        };
        if let DataSource::File { path } = &mut self.experiment.data {
            fix(path, "data")?;
        }
        if let MaskSpec::File { path } = &mut self.experiment.mask {
            fix(path, "mask")?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return config_err("seeds must list at least one seed");
        }
        self.experiment.validate().map_err(|e| ConfigError(e.to_string()))?;
        let u = &self.ufm;
        if u.num_classes < 2 || u.num_domains < 1 || u.n_per_cell == 0 {
            return config_err("ufm needs num_classes >= 2, num_domains >= 1 and n_per_cell >= 1");
        }
        if u.dim < u.num_classes + u.num_domains {
            return config_err(format!("ufm dim {} is below num_classes + num_domains", u.dim));
        }
        if !(u.beta > 0.0 && u.lr > 0.0 && u.lambda >= 0.0) || u.anneal_rounds == 0 || u.steps == 0 {
            return config_err("ufm needs beta > 0, lr > 0, lambda >= 0, steps >= 1 and anneal_rounds >= 1");
        }
        Ok(())
    }

    /// Applies command-line overrides, then validates again.
    pub fn with_overrides(mut self, seed: Option<u64>, method: Option<&str>, wise_alpha: Option<f64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        if let Some(m) = method {
            self.experiment.method = Method::parse(m).map_err(|e| ConfigError(e.to_string()))?;
        }
        if wise_alpha.is_some() {
            self.experiment.wise_alpha = wise_alpha;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn echo(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Prefixes a validation message with the line of the key it names, when
/// that key appears in the text.
fn locate(text: &str, msg: &str) -> String {
    let msg = msg.strip_prefix("invalid argument: ").unwrap_or(msg);
    let key: String = msg.chars().take_while(|c| c.is_ascii_alphanumeric() || *c == '_').collect();
    if key.is_empty() {
        return msg.to_string();
    }
    let hit = text.lines().position(|line| {
        let t = line.trim_start();
        t.strip_prefix(key.as_str())
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    });
    match hit {
        Some(i) => format!("line {}: {msg}", i + 1),
        None => msg.to_string(),
    }
}

/// SHA-256 of the canonical echo, hex encoded.
pub fn config_hash(echo: &str) -> String {
    hex::encode(Sha256::digest(echo.as_bytes()))
}

pub fn stamp(hash: &str, seed: u64) -> RunStamp {
    RunStamp {
        config_hash: hash.to_string(),
        seed,
    }
}

/// Worker count from `CFA_THREADS`, default 1.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("CFA_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => config_err(format!("CFA_THREADS must be a positive integer, got {v:?}")),
        },
    }
}
