use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn gcmf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcmf"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = gcmf(dir, args);
    assert!(
        out.status.success(),
        "gcmf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth_small(dir: &Path) {
    ok(
        dir,
        &["synth", "--protocol", "circular", "--m", "3", "--sizes", "12,16", "--holdout", "0.4", "--seed", "3", "--out", "syn"],
    );
}

#[test]
fn synth_writes_one_file_per_relation() {
    let tmp = TempDir::new().unwrap();
    ok(tmp.path(), &["synth", "--protocol", "circular", "--m", "5", "--sizes", "10,12", "--out", "syn"]);
    let relations = fs::read_dir(tmp.path().join("syn"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("relation_"))
        .count();
    assert_eq!(relations, 5);
    assert!(tmp.path().join("syn/schema.json").exists());
    assert!(tmp.path().join("syn/truth_factors_5.csv").exists());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = gcmf(tmp.path(), &["fit", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_file_fails_with_one_line() {
    let tmp = TempDir::new().unwrap();
    synth_small(tmp.path());
    let out = gcmf(tmp.path(), &["fit", "--schema", "syn/schema.json", "--data", "absent.txt", "--out", "fit"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.contains("absent.txt"));
}

#[test]
fn fit_is_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth_small(d);
    for out in ["a", "b"] {
        ok(d, &["fit", "--schema", "syn/schema.json", "--data", "syn/train.txt", "--max-iters", "40", "--seed", "9", "--out", out]);
    }
    for file in ["checkpoint.json", "trace.csv"] {
        assert_eq!(fs::read(d.join("a").join(file)).unwrap(), fs::read(d.join("b").join(file)).unwrap(), "{file}");
    }
    let trace = fs::read_to_string(d.join("a/trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,elbo,rmse_1,rmse_2,rmse_3,max_delta\n"));
    assert_eq!(trace.lines().count(), 41);
}

#[test]
fn fit_eval_predict_pipeline() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth_small(d);
    let common = ["--schema", "syn/schema.json", "--data", "syn/train.txt", "--max-iters", "60", "--seed", "1"];
    ok(d, &[&["fit"][..], &common, &["--out", "g"]].concat());
    ok(d, &[&["fit"][..], &common, &["--variant", "cmf", "--out", "c"]].concat());
    ok(
        d,
        &["eval", "--checkpoint", "c/checkpoint.json", "--checkpoint", "g/checkpoint.json", "--data", "syn/test.txt", "--out", "ev"],
    );
    let table = fs::read_to_string(d.join("ev/eval.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "model,relation,n_test,rmse,relative_error");
    // Three relations plus the pooled row, for each of two models.
    assert_eq!(lines.len(), 1 + 2 * 4);
    assert!(lines[4].starts_with("c/checkpoint.json,all,"));
    assert!(lines[4].ends_with(",1"));
    let n_test: usize = lines[4].split(',').nth(2).unwrap().parse().unwrap();
    assert_eq!(n_test, fs::read_to_string(d.join("syn/test.txt")).unwrap().lines().count());

    fs::write(d.join("q.txt"), "1 0 0\n2 3 1 0.5\n").unwrap();
    let preds = ok(d, &["predict", "--checkpoint", "g/checkpoint.json", "--queries", "q.txt"]);
    let rows: Vec<Vec<&str>> = preds.lines().map(|l| l.split(' ').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[1][..3], &["2", "3", "1"]);
    assert!(rows[1][3].parse::<f64>().unwrap().is_finite());
}

#[test]
fn config_file_supplies_flags() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth_small(d);
    fs::write(
        d.join("run.toml"),
        "schema = \"syn/schema.json\"\ndata = \"syn/train.txt\"\nk = 4\nmax_iters = 5\nseed = 2\nout = \"cfg\"\n",
    )
    .unwrap();
    ok(d, &["fit", "--config", "run.toml"]);
    let ck = fs::read_to_string(d.join("cfg/checkpoint.json")).unwrap();
    assert!(ck.contains("\"rank\":4"));
    // A flag overrides the file.
    ok(d, &["fit", "--config", "run.toml", "--max-iters", "3", "--out", "cfg2"]);
    assert_eq!(fs::read_to_string(d.join("cfg2/trace.csv")).unwrap().lines().count(), 4);
}

#[test]
fn cv_map_writes_table_and_best_fit() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth_small(d);
    let stdout = ok(
        d,
        &[
            "cv-map", "--schema", "syn/schema.json", "--data", "syn/train.txt", "--grid-points", "2", "--grid-min", "0.01",
            "--grid-max", "1", "--max-iters", "20", "--out", "cv",
        ],
    );
    assert!(stdout.starts_with("8 fits"));
    let table = fs::read_to_string(d.join("cv/cv.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 8);
    assert!(d.join("cv/checkpoint.json").exists());
    assert!(fs::read_to_string(d.join("cv/trace.csv")).unwrap().starts_with("iteration,log_posterior"));
}

#[test]
fn unknown_protocol_is_reported() {
    let tmp = TempDir::new().unwrap();
    let out = gcmf(tmp.path(), &["protocol", "--name", "nope", "--out", "p"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown protocol"));
}
