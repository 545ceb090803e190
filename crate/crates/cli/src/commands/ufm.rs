use std::path::PathBuf;

use anyhow::{Context, Result};
use cfa_core::heads::HeadPair;
use cfa_core::io::RunStamp;
use cfa_core::ufm::{solve_ufm, solve_ufm_annealed, verify_alignment, verify_decomposition, DecompositionReport, UfmProblem, UfmSolution};
use cfa_core::RngState;
use clap::{Args, Subcommand};
use serde::{Deserialize, Serialize};

use super::Loaded;
use crate::config::{stamp, UfmHeadKind};
use crate::output::OutDir;
use crate::RunArgs;

#[derive(Subcommand)]
pub enum UfmCommand {
    /// Minimize the two-head loss over unit-norm free features.
    Solve(#[command(flatten)] RunArgs),
    /// Decompose a solved feature matrix along the head row spaces.
    Verify(VerifyArgs),
}

#[derive(Args)]
pub struct VerifyArgs {
    /// File written by `ufm solve`.
    #[arg(long)]
    input: PathBuf,
    /// Defaults to the input's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Problem and solution as written by `ufm solve`. `z` is `d x N`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UfmFile {
    pub stamp: RunStamp,
    pub lambda: f64,
    pub heads: HeadPair,
    pub y: Vec<usize>,
    pub e: Vec<usize>,
    pub solution: UfmSolution,
}

#[derive(Serialize)]
struct VerifyFile<'a> {
    stamp: &'a RunStamp,
    alignment_gamma: f64,
    alignment_rel_residual: f64,
    report: DecompositionReport,
}

pub fn ufm(cmd: &UfmCommand) -> Result<()> {
    match cmd {
        UfmCommand::Solve(args) => solve(args),
        UfmCommand::Verify(args) => verify(args),
    }
}

fn solve(args: &RunArgs) -> Result<()> {
    let l = Loaded::new(args, None, None)?;
    let seed = l.seed();
    let u = &l.cfg.ufm;
    let rng = RngState::new(seed);
    let (k, e, d) = (u.num_classes, u.num_domains, u.dim);
    let heads = match u.heads {
        UfmHeadKind::Orthonormal => HeadPair::orthonormal(k, e, d, u.beta, u.beta, &mut rng.fork(1))?,
        UfmHeadKind::SimplexEtf => HeadPair::simplex_etf(k, e, d, u.beta, u.beta, &mut rng.fork(1))?,
    };
    let cells = k * e * u.n_per_cell;
    let y: Vec<usize> = (0..cells).map(|i| (i / u.n_per_cell) % k).collect();
    let dom: Vec<usize> = (0..cells).map(|i| i / (u.n_per_cell * k)).collect();
    let problem = UfmProblem::new(heads, y, dom, u.lambda)?;
    let (solution, heads) = if u.anneal_rounds == 1 {
        (solve_ufm(&problem, u.steps, u.lr, &mut rng.fork(2))?, problem.heads.clone())
    } else {
        solve_ufm_annealed(&problem, u.anneal_rounds, u.steps, u.lr, &mut rng.fork(2))?
    };
    let file = UfmFile {
        stamp: stamp(&l.hash, seed),
        lambda: problem.lambda,
        heads,
        y: problem.y,
        e: problem.e,
        solution,
    };
    let out = l.out_dir(args, &[])?;
    let mut json = serde_json::to_string_pretty(&file)?;
    json.push('\n');
    out.write("ufm.toml", l.echo.as_bytes())?;
    let path = out.write("ufm.json", json.as_bytes())?;
    println!(
        "objective {:.6e} after {} iterations -> {}",
        file.solution.objective,
        file.solution.iterations,
        path.display()
    );
    Ok(())
}

fn verify(args: &VerifyArgs) -> Result<()> {
    let bytes = std::fs::read(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let file: UfmFile = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", args.input.display()))?;
    let z = &file.solution.z;
    let report = verify_decomposition(z, &file.heads, &file.y, &file.e)?;
    let (gamma, rel) = verify_alignment(z, &file.heads, &file.y)?;
    let dir = args
        .out
        .clone()
        .or_else(|| args.input.parent().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let out = OutDir::create(&dir, &[&args.input])?;
    let v = VerifyFile {
        stamp: &file.stamp,
        alignment_gamma: gamma,
        alignment_rel_residual: rel,
        report,
    };
    let mut json = serde_json::to_string_pretty(&v)?;
    json.push('\n');
    let path = out.write("decomposition.json", json.as_bytes())?;
    println!("residual_fraction={:e}", v.report.residual_fraction);
    println!("within_class_spread={:e}", v.report.within_class_spread);
    println!("within_domain_spread={:e}", v.report.within_domain_spread);
    println!("alignment_gamma={} rel_residual={:e}", gamma, rel);
    println!("-> {}", path.display());
    Ok(())
}
