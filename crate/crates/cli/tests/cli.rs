use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seeds = [0, 1]
hidden = [16]
feature_dim = 8
pretrain_epochs = 1

[data]
kind = "structured"
num_classes = 3
num_domains = 2
d1 = 3
d2 = 2
dim = 10
sigma = 0.1
noise = 0.1
rotate = true
n_per_cell = 30

[train]
epochs = 2
batch_size = 16
stage1_iters = 200

[ufm]
steps = 50000
"#;

fn cfa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfa"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cfa(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    cfa(dir, args).status.code().expect("exit code")
}

fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    fs::write(root.join("small.toml"), SMALL).unwrap();
    (dir, root)
}

#[test]
fn rerun_writes_identical_bytes() {
    let (_t, d) = workspace();
    ok(&d, &["run", "--config", "small.toml", "--out", "a"]);
    ok(&d, &["run", "--config", "small.toml", "--out", "b"]);
    for f in ["run.toml", "aggregate.csv", "seed_0.json", "seed_1.json", "seed_0.cfa"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let agg = fs::read_to_string(d.join("a/aggregate.csv")).unwrap();
    assert!(agg.starts_with("# config_hash="));
    let report = fs::read_to_string(d.join("a/seed_1.json")).unwrap();
    assert!(report.contains("\"config_hash\""));
    for split in ["train", "id_val", "ood_val", "ood_test"] {
        assert!(report.contains(&format!("\"split\": \"{split}\"")), "{split}");
    }
}

#[test]
fn repeated_seeds_give_identical_reports() {
    let (_t, d) = workspace();
    let cfg = SMALL.replace("seeds = [0, 1]", "seeds = [1, 1]");
    fs::write(d.join("dup.toml"), cfg).unwrap();
    ok(&d, &["run", "--config", "dup.toml", "--out", "r"]);
    let agg = fs::read_to_string(d.join("r/aggregate.csv")).unwrap();
    assert!(agg.lines().nth(2).unwrap().starts_with("cfa,2,"));
}

#[test]
fn config_echo_reloads_to_the_same_hash() {
    let (_t, d) = workspace();
    ok(&d, &["gen", "--config", "small.toml", "--seed", "0", "--out", "g"]);
    ok(&d, &["gen", "--config", "g/gen.toml", "--out", "h"]);
    assert_eq!(fs::read(d.join("g/gen.toml")).unwrap(), fs::read(d.join("h/gen.toml")).unwrap());
    assert_eq!(fs::read(d.join("g/dataset.cfd")).unwrap(), fs::read(d.join("h/dataset.cfd")).unwrap());
    let echo = fs::read_to_string(d.join("g/gen.toml")).unwrap();
    for key in ["lambda_ortho", "stage1_iters", "weight_decay", "id_val_ratio", "[ufm]"] {
        assert!(echo.contains(key), "{key} missing from echo");
    }
}

#[test]
fn file_pipeline_matches_generated_pipeline() {
    let (_t, d) = workspace();
    ok(&d, &["gen", "--config", "small.toml", "--seed", "0", "--out", "g"]);
    ok(&d, &["curate", "--data", "g/dataset.cfd", "--ood-fraction", "0.34", "--out", "c"]);
    ok(&d, &["split", "--data", "g/dataset.cfd", "--mask", "c/mask.json", "--out", "s"]);
    let split = fs::read_to_string(d.join("s/split.json")).unwrap();
    assert!(split.contains("ood_test"));

    let from_files = SMALL
        .replace("[data]\nkind = \"structured\"", "[data]\nkind = \"file\"\npath = \"g/dataset.cfd\"\n[unused]\nkind = \"structured\"")
        .replace("[train]", "[mask]\nkind = \"file\"\npath = \"c/mask.json\"\n\n[train]");
    fs::write(d.join("files.toml"), &from_files).unwrap();
    // The leftover generator keys live under an unknown table and must be rejected.
    assert_eq!(code(&d, &["run", "--config", "files.toml", "--out", "x"]), 2);

    let clean = "seeds = [0]\nhidden = [16]\nfeature_dim = 8\npretrain_epochs = 1\n\
                 [data]\nkind = \"file\"\npath = \"g/dataset.cfd\"\n\
                 [mask]\nkind = \"file\"\npath = \"c/mask.json\"\n\
                 [train]\nepochs = 2\nbatch_size = 16\nstage1_iters = 200\n";
    fs::write(d.join("files.toml"), clean).unwrap();
    let before = fs::read(d.join("g/dataset.cfd")).unwrap();
    let mask_before = fs::read(d.join("c/mask.json")).unwrap();
    ok(&d, &["run", "--config", "files.toml", "--out", "x"]);
    assert_eq!(fs::read(d.join("g/dataset.cfd")).unwrap(), before);
    assert_eq!(fs::read(d.join("c/mask.json")).unwrap(), mask_before);
    assert!(d.join("x/seed_0.json").is_file());

    let generated = SMALL
        .replace("seeds = [0, 1]", "seeds = [0]")
        .replace("[train]", "[mask]\nkind = \"curated\"\nood_fraction = 0.34\n\n[train]");
    fs::write(d.join("gen_run.toml"), generated).unwrap();
    ok(&d, &["run", "--config", "gen_run.toml", "--out", "y"]);
    // Same numbers; only the stamp line differs.
    let rows = |dir: &str| -> Vec<String> {
        let text = fs::read_to_string(d.join(dir).join("aggregate.csv")).unwrap();
        text.lines().skip(1).map(String::from).collect()
    };
    assert_eq!(rows("x"), rows("y"));
}

#[test]
fn lp_then_ft_then_wise_endpoints() {
    let (_t, d) = workspace();
    let lp = ok(&d, &["lp", "--config", "small.toml", "--seed", "0", "--out", "l"]);
    assert!(lp.contains("domain head train acc"));
    ok(&d, &["ft", "--config", "small.toml", "--seed", "0", "--init", "l/lp.cfa", "--out", "f"]);
    ok(&d, &["wise", "--a", "l/lp.cfa", "--b", "f/model.cfa", "--alpha", "0", "--out", "w0"]);
    ok(&d, &["wise", "--a", "l/lp.cfa", "--b", "f/model.cfa", "--alpha", "1", "--out", "w1"]);
    ok(&d, &["wise", "--a", "l/lp.cfa", "--b", "f/model.cfa", "--wise-alpha", "0.5", "--out", "wh"]);
    assert_eq!(fs::read(d.join("w0/wise.cfa")).unwrap(), fs::read(d.join("l/lp.cfa")).unwrap());
    assert_eq!(fs::read(d.join("w1/wise.cfa")).unwrap(), fs::read(d.join("f/model.cfa")).unwrap());
    assert_ne!(fs::read(d.join("wh/wise.cfa")).unwrap(), fs::read(d.join("f/model.cfa")).unwrap());
    let ev = ok(&d, &["eval", "--config", "small.toml", "--seed", "0", "--checkpoint", "wh/wise.cfa", "--out", "e"]);
    assert!(ev.contains("ood acc"));
    let vis = fs::read_to_string(d.join("e/vis.csv")).unwrap();
    assert_eq!(vis.lines().nth(1).unwrap(), "x,y,class,domain,split");
}

#[test]
fn every_method_runs_through_ft() {
    let (_t, d) = workspace();
    for m in ["cfa", "ft", "lp_ft", "reweight_e", "reweight_yxe"] {
        let out = ok(&d, &["ft", "--config", "small.toml", "--seed", "0", "--method", m, "--out", m]);
        assert!(out.starts_with(m), "{out}");
    }
    assert_eq!(code(&d, &["ft", "--config", "small.toml", "--method", "sgd", "--out", "bad"]), 2);
}

#[test]
fn ufm_solve_then_verify() {
    let (_t, d) = workspace();
    ok(&d, &["ufm", "solve", "--config", "small.toml", "--out", "u"]);
    let v = ok(&d, &["ufm", "verify", "--input", "u/ufm.json"]);
    let line = v.lines().find(|l| l.starts_with("residual_fraction=")).unwrap();
    let r: f64 = line.trim_start_matches("residual_fraction=").parse().unwrap();
    assert!(r < 1e-8, "{r}");
    assert!(d.join("u/decomposition.json").is_file());
}

#[test]
fn ufm_budget_exhaustion_is_exit_3() {
    let (_t, d) = workspace();
    let cfg = SMALL.replace("steps = 50000", "steps = 5\nlr = 0.001");
    fs::write(d.join("short.toml"), cfg).unwrap();
    assert_eq!(code(&d, &["ufm", "solve", "--config", "short.toml", "--out", "u"]), 3);
}

#[test]
fn sweep_trace_has_one_column_per_coefficient() {
    let (_t, d) = workspace();
    ok(
        &d,
        &["sweep", "--config", "small.toml", "--lambda-ortho", "0,1,10,100,1000", "--trace-only", "--out", "s"],
    );
    let csv = fs::read_to_string(d.join("s/ortho_trace.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert_eq!(
        lines.next().unwrap(),
        "step,lambda_ortho=0,lambda_ortho=1,lambda_ortho=10,lambda_ortho=100,lambda_ortho=1000"
    );
    // Initial value plus one entry per iteration.
    assert_eq!(lines.count(), 201);
    ok(&d, &["sweep", "--config", "small.toml", "--seed", "0", "--lambda", "0,1", "--stage1-iters", "50,100", "--out", "g"]);
    let grid = fs::read_to_string(d.join("g/sweep.csv")).unwrap();
    assert_eq!(grid.lines().count(), 2 + 4);
}

#[test]
fn errors_map_to_documented_exit_codes() {
    let (_t, d) = workspace();
    fs::write(d.join("typo.toml"), "seeds = [0]\n[train]\nlamda = 1.0\n").unwrap();
    let out = cfa(&d, &["run", "--config", "typo.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    assert_eq!(code(&d, &["run", "--config", "missing.toml"]), 2);
    assert_eq!(code(&d, &["run", "--bogus-flag"]), 2);
    assert_eq!(code(&d, &["eval", "--config", "small.toml", "--checkpoint", "nope.cfa"]), 4);
    fs::write(d.join("junk.cfa"), b"not a checkpoint").unwrap();
    assert_eq!(code(&d, &["wise", "--a", "junk.cfa", "--b", "junk.cfa", "--alpha", "0.5"]), 4);
    assert_eq!(code(&d, &["gen", "--config", "small.toml", "--out", "g"]), 0);
    let env_bad = Command::new(env!("CARGO_BIN_EXE_cfa"))
        .current_dir(&d)
        .env("CFA_THREADS", "zero")
        .args(["run", "--config", "small.toml"])
        .output()
        .unwrap();
    assert_eq!(env_bad.status.code(), Some(2));
}

#[test]
fn outputs_never_overwrite_inputs() {
    let (_t, d) = workspace();
    ok(&d, &["gen", "--config", "small.toml", "--out", "g"]);
    ok(&d, &["curate", "--data", "g/dataset.cfd", "--ood-fraction", "0.34", "--out", "g"]);
    let before = fs::read(d.join("g/gen.toml")).unwrap();
    // Regenerating into the directory that holds the config it reads from.
    assert_eq!(code(&d, &["gen", "--config", "g/gen.toml", "--out", "g"]), 4);
    assert_eq!(fs::read(d.join("g/gen.toml")).unwrap(), before);
}

#[test]
fn threads_do_not_change_results() {
    let (_t, d) = workspace();
    ok(&d, &["run", "--config", "small.toml", "--out", "one"]);
    let out = Command::new(env!("CARGO_BIN_EXE_cfa"))
        .current_dir(&d)
        .env("CFA_THREADS", "2")
        .env("RUST_LOG", "warn")
        .args(["run", "--config", "small.toml", "--out", "two"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(d.join("one/aggregate.csv")).unwrap(), fs::read(d.join("two/aggregate.csv")).unwrap());
}
