mod data;
mod train;
mod ufm;

use std::path::{Path, PathBuf};

use anyhow::Result;
use cfa_core::experiment::DataSource;
use cfa_core::experiment::MaskSpec;
use serde::Serialize;

pub use data::{curate, gen, split, CurateArgs, SplitArgs};
pub use train::{eval, ft, lp, run, sweep, wise, EvalArgs, FtArgs, LpArgs, RunCmdArgs, SweepArgs, WiseArgs};
pub use ufm::{ufm, UfmCommand};

use crate::config::{config_hash, RunConfig};
use crate::output::OutDir;
use crate::RunArgs;

/// A loaded configuration with its echo and hash.
struct Loaded {
    cfg: RunConfig,
    echo: String,
    hash: String,
}

impl Loaded {
    fn new(args: &RunArgs, method: Option<&str>, wise_alpha: Option<f64>) -> Result<Self> {
        let cfg = RunConfig::load_or_default(args.config.as_deref())?.with_overrides(args.seed, method, wise_alpha)?;
        let echo = cfg.echo()?;
        let hash = config_hash(&echo);
        Ok(Self { cfg, echo, hash })
    }

    fn seed(&self) -> u64 {
        self.cfg.seeds[0]
    }

    /// Output directory; the config file and any data or mask files it names
    /// are registered as inputs.
    fn out_dir(&self, args: &RunArgs, extra_inputs: &[&Path]) -> Result<OutDir> {
        let dir = args
            .out
            .clone()
            .or_else(|| self.cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        let mut inputs: Vec<&Path> = extra_inputs.to_vec();
        if let Some(c) = &args.config {
            inputs.push(c);
        }
        if let DataSource::File { path } = &self.cfg.experiment.data {
            inputs.push(path);
        }
        if let MaskSpec::File { path } = &self.cfg.experiment.mask {
            inputs.push(path);
        }
        OutDir::create(&dir, &inputs)
    }
}

/// Echo and hash for subcommands driven by flags alone.
fn flag_echo<T: Serialize>(args: &T) -> Result<(String, String)> {
    let echo = toml::to_string(args)?;
    let hash = config_hash(&echo);
    Ok((echo, hash))
}

fn stamp_line(hash: &str, seeds: &[u64]) -> String {
    let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    format!("config_hash={hash} seeds={}", list.join(";"))
}
