//! `cfa`: batch runner for the compositional feature alignment lab.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use cfa_core::CfaError;
use clap::{Args, Parser, Subcommand};

use crate::config::ConfigError;

#[derive(Parser)]
#[command(name = "cfa", version, about = "Compositional feature alignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the config-driven subcommands.
#[derive(Args, Clone, Debug)]
pub struct RunArgs {
    /// TOML configuration; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed list with a single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: `out_dir` from the config, else `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset with every domain-class cell populated.
    Gen(#[command(flatten)] RunArgs),
    /// Choose held-out cells from per-cell scores.
    Curate(commands::CurateArgs),
    /// Stratified train / id_val / ood_val / ood_test split.
    Split(commands::SplitArgs),
    /// Stage-1 probe of the class and domain heads on frozen features.
    Lp(commands::LpArgs),
    /// Stage-2 finetuning for CFA, or one of the baselines.
    Ft(commands::FtArgs),
    /// Evaluate a checkpoint on the configured data and split.
    Eval(commands::EvalArgs),
    /// Interpolate two checkpoints in weight space.
    Wise(commands::WiseArgs),
    /// Unconstrained feature model: solve or verify.
    #[command(subcommand)]
    Ufm(commands::UfmCommand),
    /// Grid over lambda, lambda_ortho and stage1_iters.
    Sweep(commands::SweepArgs),
    /// Full pipeline over every configured seed.
    Run(commands::RunCmdArgs),
}

/// 2 for configuration problems, 3 for non-convergence, 4 for I/O.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<toml::de::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<CfaError>() {
            return match e {
                CfaError::NonConvergence { .. } | CfaError::DegenerateRow { .. } => 3,
                CfaError::Io(_) | CfaError::Format(_) | CfaError::Json(_) => 4,
                _ => 2,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 4;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Curate(a) => commands::curate(&a),
        Command::Split(a) => commands::split(&a),
        Command::Lp(a) => commands::lp(&a),
        Command::Ft(a) => commands::ft(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Wise(a) => commands::wise(&a),
        Command::Ufm(c) => commands::ufm(&c),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Run(a) => commands::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_kinds_map_to_exit_codes() {
        let conv: anyhow::Error = CfaError::NonConvergence {
            what: "x".into(),
            trace: vec![1.0],
        }
        .into();
        assert_eq!(exit_code(&conv), 3);
        let io: anyhow::Error = CfaError::Io(std::io::Error::other("disk")).into();
        assert_eq!(exit_code(&io.context("loading")), 4);
        assert_eq!(exit_code(&ConfigError("bad".into()).into()), 2);
        assert_eq!(exit_code(&CfaError::Argument("bad".into()).into()), 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
