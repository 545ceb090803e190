use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cfa_core::experiment::{
    aggregate, aggregate_csv, encode_subset, evaluate, prepare_data, pretrain, run_seeds, train_method, wise_bundle,
    AggregateRow, ExperimentConfig, Method, PreparedData,
};
use cfa_core::io::{csv_float, RunStamp};
use cfa_core::metrics::{visualization_coords, visualization_csv, MetricsReport};
use cfa_core::train::{finetune, metrics_csv, stage1_linear_probe, CheckpointBundle, TrainConfig};
use clap::Args;
use serde::Serialize;

use super::{flag_echo, stamp_line, Loaded};
use crate::config::{stamp, threads_from_env};
use crate::output::OutDir;
use crate::RunArgs;

fn stamped(mut b: CheckpointBundle, s: &RunStamp) -> CheckpointBundle {
    b.stamp = Some(s.clone());
    b
}

fn report_json(mut r: MetricsReport, s: &RunStamp) -> Result<String> {
    r.stamp = Some(s.clone());
    let mut json = r.to_json()?;
    json.push('\n');
    Ok(json)
}

fn load_checkpoint(path: &Path) -> Result<CheckpointBundle> {
    CheckpointBundle::load(path).with_context(|| format!("loading {}", path.display()))
}

/// Starting point: the given checkpoint, or a freshly pretrained one that is
/// also written to `theta0.cfa`.
fn starting_point(
    exp: &ExperimentConfig,
    data: &PreparedData,
    seed: u64,
    init: Option<&Path>,
    out: &OutDir,
    s: &RunStamp,
) -> Result<CheckpointBundle> {
    match init {
        Some(p) => load_checkpoint(p),
        None => {
            let theta0 = stamped(pretrain(exp, data, seed)?, s);
            out.write("theta0.cfa", &theta0.encode()?)?;
            Ok(theta0)
        }
    }
}

#[derive(Args)]
pub struct LpArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Encoder checkpoint to probe; pretrained from the config when absent.
    #[arg(long)]
    init: Option<PathBuf>,
}

fn probe_csv(domain: &[f64], class: &[f64], ortho: &[f64], s: &RunStamp) -> String {
    let mut out = format!("# config_hash={} seed={}\nstep,domain_loss,class_loss,ortho_norm\n", s.config_hash, s.seed);
    let cell = |v: &[f64], i: usize| v.get(i).copied().map_or(String::new(), csv_float);
    for i in 0..domain.len().max(class.len()).max(ortho.len()) {
        let _ = writeln!(out, "{i},{},{},{}", cell(domain, i), cell(class, i), cell(ortho, i));
    }
    out
}

pub fn lp(args: &LpArgs) -> Result<()> {
    let l = Loaded::new(&args.run, None, None)?;
    let seed = l.seed();
    let s = stamp(&l.hash, seed);
    let exp = &l.cfg.experiment;
    let init: Vec<&Path> = args.init.iter().map(PathBuf::as_path).collect();
    let out = l.out_dir(&args.run, &init)?;
    out.write("lp.toml", l.echo.as_bytes())?;
    let data = prepare_data(exp, seed)?;
    let theta0 = starting_point(exp, &data, seed, args.init.as_deref(), &out, &s)?;
    let tcfg = TrainConfig {
        seed,
        ..exp.train.clone()
    };
    let feats = encode_subset(&theta0.encoder, &data.dataset, &data.split.train)?;
    let probe = stage1_linear_probe(&feats, &tcfg)?;
    let bundle = CheckpointBundle {
        encoder: theta0.encoder.clone(),
        heads: probe.heads.clone(),
        config: tcfg,
        trace: Vec::new(),
        ortho_trace: probe.ortho_trace.clone(),
        stamp: Some(s.clone()),
    };
    out.write("probe.csv", probe_csv(&probe.domain_trace, &probe.class_trace, &probe.ortho_trace, &s).as_bytes())?;
    let path = out.write("lp.cfa", &bundle.encode()?)?;
    println!(
        "domain head train acc {:.4}, ||W1 W2^T|| {:.3e} -> {}",
        probe.domain_train_acc,
        bundle.heads.w1.matmul_t(&bundle.heads.w2).frobenius_norm(),
        path.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct FtArgs {
    #[command(flatten)]
    run: RunArgs,
    /// cfa, ft, lp_ft, reweight_e or reweight_yxe.
    #[arg(long)]
    method: Option<String>,
    /// Interpolate between the starting point and the finetuned model.
    #[arg(long)]
    wise_alpha: Option<f64>,
    /// Starting checkpoint. For cfa this is the probed model from `lp`.
    #[arg(long)]
    init: Option<PathBuf>,
}

pub fn ft(args: &FtArgs) -> Result<()> {
    let l = Loaded::new(&args.run, args.method.as_deref(), args.wise_alpha)?;
    let seed = l.seed();
    let s = stamp(&l.hash, seed);
    let exp = &l.cfg.experiment;
    let init: Vec<&Path> = args.init.iter().map(PathBuf::as_path).collect();
    let out = l.out_dir(&args.run, &init)?;
    out.write("ft.toml", l.echo.as_bytes())?;
    let data = prepare_data(exp, seed)?;
    let start = starting_point(exp, &data, seed, args.init.as_deref(), &out, &s)?;
    let (model, initial_heads) = if exp.method == Method::Cfa && args.init.is_some() {
        let tcfg = TrainConfig {
            seed,
            ..exp.train.clone()
        };
        let mut b = finetune(&start.encoder, &start.heads, &data.dataset, &data.split.train, &tcfg)?;
        b.ortho_trace = start.ortho_trace.clone();
        (b, start.heads.clone())
    } else {
        let o = train_method(exp, exp.method, &data, &start, seed)?;
        (o.bundle, o.initial_heads)
    };
    let model = match exp.wise_alpha {
        Some(a) => wise_bundle(&start.encoder, &initial_heads, &model, a)?,
        None => model,
    };
    let model = stamped(model, &s);
    let report = evaluate(&model, &data.dataset, &data.split, exp.method.name())?;
    out.write("epochs.csv", metrics_csv(&model.trace, Some(&s)).as_bytes())?;
    out.write("report.json", report_json(report.clone(), &s)?.as_bytes())?;
    let path = out.write("model.cfa", &model.encode()?)?;
    println!(
        "{}: id acc {:.4}, ood acc {:.4} -> {}",
        exp.method.name(),
        report.id_acc,
        report.ood_acc,
        path.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Method name recorded in the report.
    #[arg(long)]
    method: Option<String>,
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let l = Loaded::new(&args.run, args.method.as_deref(), None)?;
    let seed = l.seed();
    let s = stamp(&l.hash, seed);
    let exp = &l.cfg.experiment;
    let out = l.out_dir(&args.run, &[&args.checkpoint])?;
    let model = load_checkpoint(&args.checkpoint)?;
    let data = prepare_data(exp, seed)?;
    let ds = &data.dataset;
    let report = evaluate(&model, ds, &data.split, exp.method.name())?;

    let mut cells = format!("# config_hash={} seed={}\ndomain,class,acc\n", s.config_hash, s.seed);
    let pc = &report.per_cell_acc;
    for e in 0..pc.rows() {
        for k in 0..pc.cols() {
            let _ = writeln!(cells, "{e},{k},{}", csv_float(pc.get(e, k)));
        }
    }
    let mut idx = Vec::new();
    let mut names = Vec::new();
    let sp = &data.split;
    for (name, list) in [("train", &sp.train[..])].into_iter().chain(sp.eval_splits()) {
        idx.extend_from_slice(list);
        names.extend(std::iter::repeat_n(name, list.len()));
    }
    let z = model.encoder.forward(&ds.inputs.select_rows(&idx))?;
    let coords = visualization_coords(&z, &model.heads)?;
    let y: Vec<usize> = idx.iter().map(|&i| ds.class_labels[i]).collect();
    let e: Vec<usize> = idx.iter().map(|&i| ds.domain_labels[i]).collect();

    out.write("eval.toml", l.echo.as_bytes())?;
    out.write("per_cell.csv", cells.as_bytes())?;
    out.write("vis.csv", visualization_csv(&coords, &y, &e, &names, Some(&s))?.as_bytes())?;
    let path = out.write("report.json", report_json(report.clone(), &s)?.as_bytes())?;
    println!(
        "id acc {:.4}, ood acc {:.4}, worst-domain ood acc {:.4} -> {}",
        report.id_acc,
        report.ood_acc,
        report.worst_domain_ood_acc,
        path.display()
    );
    Ok(())
}

#[derive(Args, Serialize)]
pub struct WiseArgs {
    /// Starting point (alpha = 0).
    #[arg(long)]
    a: PathBuf,
    /// Finetuned model (alpha = 1).
    #[arg(long)]
    b: PathBuf,
    #[arg(long, visible_alias = "wise-alpha")]
    alpha: f64,
    #[arg(long, default_value = "out")]
    #[serde(skip)]
    out: PathBuf,
}

pub fn wise(args: &WiseArgs) -> Result<()> {
    let (echo, hash) = flag_echo(args)?;
    let a = load_checkpoint(&args.a)?;
    let b = load_checkpoint(&args.b)?;
    let mixed = wise_bundle(&a.encoder, &a.heads, &b, args.alpha)?;
    // The endpoints are the inputs themselves, stamp included.
    let bytes = if args.alpha == 0.0 {
        a.encode()?
    } else if args.alpha == 1.0 {
        b.encode()?
    } else {
        let seed = b.stamp.as_ref().map_or(0, |s| s.seed);
        stamped(mixed, &stamp(&hash, seed)).encode()?
    };
    let out = OutDir::create(&args.out, &[&args.a, &args.b])?;
    out.write("wise.toml", echo.as_bytes())?;
    let path = out.write("wise.cfa", &bytes)?;
    println!("alpha {} -> {}", args.alpha, path.display());
    Ok(())
}

#[derive(Args)]
pub struct RunCmdArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    wise_alpha: Option<f64>,
}

/// Means over the successful seeds, or NaN when none succeeded.
fn aggregate_or_nan(method: &str, reports: &[&MetricsReport]) -> AggregateRow {
    aggregate(method, reports).unwrap_or(AggregateRow {
        method: method.into(),
        seeds: 0,
        id_acc: f64::NAN,
        ood_acc: f64::NAN,
        id_f1: f64::NAN,
        ood_f1: f64::NAN,
        worst_domain_ood_acc: f64::NAN,
    })
}

pub fn run(args: &RunCmdArgs) -> Result<()> {
    let l = Loaded::new(&args.run, args.method.as_deref(), args.wise_alpha)?;
    let threads = threads_from_env()?;
    let exp = &l.cfg.experiment;
    let out = l.out_dir(&args.run, &[])?;
    out.write("run.toml", l.echo.as_bytes())?;
    let results = run_seeds(exp, &l.cfg.seeds, threads);
    let mut reports = Vec::new();
    let mut first_err = None;
    for (seed, r) in results {
        match r {
            Ok(o) => {
                let s = stamp(&l.hash, seed);
                out.write(&format!("seed_{seed}.json"), report_json(o.report.clone(), &s)?.as_bytes())?;
                out.write(&format!("seed_{seed}.cfa"), &stamped(o.model, &s).encode()?)?;
                reports.push(o.report);
            }
            Err(e) => {
                log::error!("seed {seed} aborted: {e}");
                first_err.get_or_insert(anyhow::Error::from(e).context(format!("seed {seed}")));
            }
        }
    }
    let refs: Vec<&MetricsReport> = reports.iter().collect();
    let row = aggregate_or_nan(exp.method.name(), &refs);
    let csv = aggregate_csv(std::slice::from_ref(&row), Some(&stamp_line(&l.hash, &l.cfg.seeds)));
    out.write("aggregate.csv", csv.as_bytes())?;
    println!(
        "{} over {} seeds: id acc {:.4}, ood acc {:.4}, worst-domain ood acc {:.4}",
        row.method, row.seeds, row.id_acc, row.ood_acc, row.worst_domain_ood_acc
    );
    first_err.map_or(Ok(()), Err)
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    method: Option<String>,
    /// Domain loss weights of the second stage.
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
    /// Orthogonality penalty weights of the probe. Also writes the probe's
    /// `||W1 W2^T||` trace per coefficient.
    #[arg(long, value_delimiter = ',')]
    lambda_ortho: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    stage1_iters: Vec<usize>,
    /// Only write the orthogonality trace.
    #[arg(long, requires = "lambda_ortho")]
    trace_only: bool,
}

fn or_config<T: Copy>(list: &[T], fallback: T) -> Vec<T> {
    if list.is_empty() {
        vec![fallback]
    } else {
        list.to_vec()
    }
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let l = Loaded::new(&args.run, args.method.as_deref(), None)?;
    let threads = threads_from_env()?;
    let exp = &l.cfg.experiment;
    let seeds = &l.cfg.seeds;
    let out = l.out_dir(&args.run, &[])?;
    out.write("sweep.toml", l.echo.as_bytes())?;
    let lambdas = or_config(&args.lambda, exp.train.lambda);
    let orthos = or_config(&args.lambda_ortho, exp.train.lambda_ortho);
    let iters = or_config(&args.stage1_iters, exp.train.stage1_iters);
    for v in lambdas.iter().chain(&orthos) {
        if !(*v >= 0.0 && v.is_finite()) {
            return crate::config::config_err(format!("sweep values must be finite and >= 0, got {v}"));
        }
    }

    if !args.lambda_ortho.is_empty() {
        let seed = seeds[0];
        let data = prepare_data(exp, seed)?;
        let theta0 = pretrain(exp, &data, seed)?;
        let feats = encode_subset(&theta0.encoder, &data.dataset, &data.split.train)?;
        let mut traces = Vec::new();
        for &lo in &orthos {
            let tcfg = TrainConfig {
                lambda_ortho: lo,
                seed,
                ..exp.train.clone()
            };
            traces.push(stage1_linear_probe(&feats, &tcfg)?.ortho_trace);
        }
        let s = stamp(&l.hash, seed);
        let mut csv = format!("# config_hash={} seed={}\nstep", s.config_hash, s.seed);
        for lo in &orthos {
            let _ = write!(csv, ",lambda_ortho={lo}");
        }
        csv.push('\n');
        for i in 0..traces.iter().map(Vec::len).max().unwrap_or(0) {
            let _ = write!(csv, "{i}");
            for t in &traces {
                let _ = write!(csv, ",{}", t.get(i).copied().map_or(String::new(), csv_float));
            }
            csv.push('\n');
        }
        out.write("ortho_trace.csv", csv.as_bytes())?;
    }
    if args.trace_only {
        return Ok(());
    }

    let mut csv = format!(
        "# {}\nlambda,lambda_ortho,stage1_iters,method,seeds,id_acc,ood_acc,id_f1,ood_f1,worst_domain_ood_acc\n",
        stamp_line(&l.hash, seeds)
    );
    let mut first_err = None;
    for &lambda in &lambdas {
        for &lo in &orthos {
            for &it in &iters {
                let mut point = exp.clone();
                point.train.lambda = lambda;
                point.train.lambda_ortho = lo;
                point.train.stage1_iters = it;
                let mut reports = Vec::new();
                for (seed, r) in run_seeds(&point, seeds, threads) {
                    match r {
                        Ok(o) => reports.push(o.report),
                        Err(e) => {
                            log::error!("lambda {lambda} lambda_ortho {lo} stage1_iters {it} seed {seed}: {e}");
                            first_err.get_or_insert(anyhow::Error::from(e).context(format!("seed {seed}")));
                        }
                    }
                }
                let refs: Vec<&MetricsReport> = reports.iter().collect();
                let r = aggregate_or_nan(point.method.name(), &refs);
                let _ = writeln!(
                    csv,
                    "{lambda},{lo},{it},{},{},{},{},{},{},{}",
                    r.method,
                    r.seeds,
                    csv_float(r.id_acc),
                    csv_float(r.ood_acc),
                    csv_float(r.id_f1),
                    csv_float(r.ood_f1),
                    csv_float(r.worst_domain_ood_acc)
                );
            }
        }
    }
    let path = out.write("sweep.csv", csv.as_bytes())?;
    println!("{} grid points -> {}", lambdas.len() * orthos.len() * iters.len(), path.display());
    first_err.map_or(Ok(()), Err)
}
