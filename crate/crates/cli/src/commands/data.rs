use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cfa_core::data::{encode_dataset, load_dataset};
use cfa_core::experiment::{DATA_STREAM, SPLIT_STREAM};
use cfa_core::io::RunStamp;
use cfa_core::split::{curate_from_scores, reference_probe_scores, split_dataset, MaskFile, SplitManifest};
use cfa_core::{Matrix, RngState};
use clap::Args;
use serde::{Deserialize, Serialize};

use super::{flag_echo, Loaded};
use crate::config::{config_err, stamp, ConfigError};
use crate::output::OutDir;
use crate::RunArgs;

pub fn gen(args: &RunArgs) -> Result<()> {
    let l = Loaded::new(args, None, None)?;
    let seed = l.seed();
    let ds = l.cfg.experiment.data.generate(&mut RngState::new(seed).fork(DATA_STREAM))?;
    let out = l.out_dir(args, &[])?;
    out.write("gen.toml", l.echo.as_bytes())?;
    let path = out.write("dataset.cfd", &encode_dataset(&ds, Some(&stamp(&l.hash, seed)))?)?;
    println!(
        "{} samples, K={} E={}, input dim {} -> {}",
        ds.len(),
        ds.num_classes(),
        ds.num_domains(),
        ds.input_dim(),
        path.display()
    );
    Ok(())
}

#[derive(Args, Serialize)]
pub struct CurateArgs {
    /// Dataset container.
    #[arg(long)]
    data: PathBuf,
    /// CSV of `E` rows with `K` scores each; default is the nearest
    /// class-mean reference probe.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    scores: Option<PathBuf>,
    /// Fraction of cells to hold out before coverage repair.
    #[arg(long)]
    ood_fraction: f64,
    #[arg(long, default_value = "out")]
    #[serde(skip)]
    out: PathBuf,
}

/// Reads an `E x K` score table; blank lines and `#` comments are skipped.
fn read_scores(path: &Path, e: usize, k: usize) -> Result<Matrix> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|err| ConfigError(format!("{} line {}: {err}", path.display(), i + 1)))?;
        if row.len() != k {
            return config_err(format!("{} line {}: expected {k} scores, got {}", path.display(), i + 1, row.len()));
        }
        rows.push(row);
    }
    if rows.len() != e {
        return config_err(format!("{}: expected {e} rows of scores, got {}", path.display(), rows.len()));
    }
    Ok(Matrix::from_rows(&rows)?)
}

pub fn curate(args: &CurateArgs) -> Result<()> {
    let (echo, hash) = flag_echo(args)?;
    let (ds, data_stamp) = load_dataset(&args.data).with_context(|| format!("loading {}", args.data.display()))?;
    let scores = match &args.scores {
        Some(p) => read_scores(p, ds.num_domains(), ds.num_classes())?,
        None => reference_probe_scores(&ds)?,
    };
    let cur = curate_from_scores(&scores, args.ood_fraction)?;
    let seed = data_stamp.map_or(0, |s| s.seed);
    let mut inputs: Vec<&Path> = vec![&args.data];
    if let Some(p) = &args.scores {
        inputs.push(p);
    }
    let out = OutDir::create(&args.out, &inputs)?;
    let file = MaskFile {
        mask: cur.mask.clone(),
        scores: Some(scores.row_iter().map(<[f64]>::to_vec).collect()),
        repaired_cells: cur.repaired_cells.clone(),
        stamp: Some(stamp(&hash, seed)),
    };
    out.write("curate.toml", echo.as_bytes())?;
    let path = out.write("mask.json", file.to_json()?.as_bytes())?;
    println!(
        "held out {} of {} cells ({} repaired) -> {}",
        cur.mask.ood_count(),
        ds.num_domains() * ds.num_classes(),
        cur.repaired_cells.len(),
        path.display()
    );
    Ok(())
}

#[derive(Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Mask file written by `curate`.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    id_val_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    #[serde(skip)]
    out: PathBuf,
}

/// Split manifest as written to disk.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub split: SplitManifest,
    pub stamp: RunStamp,
}

pub fn split(args: &SplitArgs) -> Result<()> {
    let (echo, hash) = flag_echo(args)?;
    let (ds, _) = load_dataset(&args.data).with_context(|| format!("loading {}", args.data.display()))?;
    let mask = MaskFile::load(&args.mask).with_context(|| format!("loading {}", args.mask.display()))?.mask;
    let sp = split_dataset(&ds, &mask, args.id_val_ratio, &mut RngState::new(args.seed).fork(SPLIT_STREAM))?;
    let out = OutDir::create(&args.out, &[&args.data, &args.mask])?;
    let file = SplitFile {
        split: sp,
        stamp: stamp(&hash, args.seed),
    };
    let mut json = serde_json::to_string_pretty(&file)?;
    json.push('\n');
    out.write("split.toml", echo.as_bytes())?;
    let path = out.write("split.json", json.as_bytes())?;
    let s = &file.split;
    println!(
        "train {} id_val {} ood_val {} ood_test {} -> {}",
        s.train.len(),
        s.id_val.len(),
        s.ood_val.len(),
        s.ood_test.len(),
        path.display()
    );
    Ok(())
}
