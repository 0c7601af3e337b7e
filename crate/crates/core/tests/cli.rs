use std::path::Path;

use posture_ik::cli;
use posture_ik::eval::{EvalReport, ReportFormat};
use serde_json::Value;

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(dir: &Path, args: &[&str], stdin: &str) -> Out {
    let mut argv = vec!["posture-ik".to_string()];
    argv.extend(args.iter().map(|a| a.replace("{dir}", dir.to_str().unwrap())));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cli::run(argv, &mut stdin.as_bytes(), &mut out, &mut err);
    Out { code, stdout: String::from_utf8(out).unwrap(), stderr: String::from_utf8(err).unwrap() }
}

fn ok(dir: &Path, args: &[&str]) -> Out {
    let o = run(dir, args, "");
    assert_eq!(o.code, 0, "{args:?}: {}", o.stderr);
    o
}

fn error_kind(o: &Out) -> String {
    let v: Value = serde_json::from_str(o.stderr.lines().last().unwrap()).unwrap();
    v["error"]["kind"].as_str().unwrap().to_string()
}

const PATHS: [&str; 6] = ["--dataset", "{dir}/ds.bin", "--model", "{dir}/model.bin", "--dict", "{dir}/dict.bin"];

fn with_paths<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend(PATHS);
    v
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("run.conf"),
        "# toy run\nchain = planar3\nstep-deg = 30\nencoder-hidden = 16,16\ndecoder-hidden = 16,16\nindex-dim = 3\nepochs = 100\nbatch-size = 64\n",
    )
    .unwrap();
    let conf = ["--config", "{dir}/run.conf"];
    let args = |extra: &[&'static str]| -> Vec<&'static str> {
        let mut v = conf.to_vec();
        v.extend(extra);
        with_paths(&v)
    };

    ok(dir, &[&["collect"][..], &args(&[])].concat());
    let first = std::fs::read(dir.join("ds.bin")).unwrap();
    ok(dir, &[&["collect"][..], &args(&[])].concat());
    assert_eq!(std::fs::read(dir.join("ds.bin")).unwrap(), first);

    // flags override the file
    let o = ok(dir, &[&["train"][..], &args(&["--epochs", "2"])].concat());
    let curve = std::fs::read_to_string(dir.join("model.bin.curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3, "{}", o.stderr);
    let status: Value = serde_json::from_str(o.stderr.lines().last().unwrap()).unwrap();
    assert!(status["final_loss"].is_number());

    ok(dir, &[&["build-index"][..], &args(&["--lambda", "auto"])].concat());

    let o = ok(dir, &[&["solve"][..], &args(&["--goal", "0.5,0.3,0"])].concat());
    let results: Value = serde_json::from_str(&o.stdout).unwrap();
    let arr = results.as_array().unwrap();
    assert!(!arr.is_empty());
    let errs: Vec<f64> = arr.iter().map(|r| r["distance_error"].as_f64().unwrap()).collect();
    assert!(errs.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(arr[0]["q"].as_array().unwrap().len(), 3);

    // goal on stdin, one selected index
    let o = run(dir, &[&["solve"][..], &args(&["--selector", "nth:0"])].concat(), "0.5, 0.3, 0\n");
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert_eq!(serde_json::from_str::<Value>(&o.stdout).unwrap().as_array().unwrap().len(), 1);

    let o = ok(dir, &[&["solve"][..], &args(&["--goal", "1000,0,0"])].concat());
    assert!(o.stderr.contains("warning"));
    assert_eq!(serde_json::from_str::<Value>(&o.stdout).unwrap()[0]["unreachable"], Value::Bool(true));

    for (exp, extra) in [
        ("accuracy", vec!["--samples", "10"]),
        ("radius", vec!["--samples", "4", "--radii", "0.4,0.8"]),
        ("timing", vec!["--samples", "5"]),
        ("diversity", vec!["--count", "3"]),
    ] {
        let out = format!("{{dir}}/{exp}.csv");
        let mut extra: Vec<&str> = extra;
        extra.extend(["--format", "csv", "--out", &out]);
        let v = [&["eval", exp][..], &with_paths(&[&conf[..], &extra].concat())].concat();
        ok(dir, &v);
        let text = std::fs::File::open(dir.join(format!("{exp}.csv"))).unwrap();
        let report = EvalReport::load(ReportFormat::Csv, text).unwrap();
        assert_eq!(report.experiment, exp);
        assert!(!report.rows.is_empty());
        assert!(report.config.contains_key("seed"));
    }

    ok(dir, &[&["eval", "index-study"][..], &args(&["--goal", "0.5,0.3,0", "--sweep", "-1,0,1", "--out", "{dir}/study.json"])].concat());
    assert!(dir.join("study.json.snapshots.csv").exists());
    assert!(dir.join("study.json.obj").exists());

    let o = ok(dir, &[&["baseline"][..], &args(&["--goal", "-0.5,0.3,0", "--count", "3"])].concat());
    let base: Value = serde_json::from_str(&o.stdout).unwrap();
    assert_eq!(base.as_array().unwrap().len(), 3);
    assert!(base.as_array().unwrap().iter().any(|r| r["converged"].as_bool().unwrap()));

    // failures: machine-readable, nonzero
    let o = run(dir, &[&["solve"][..], &args(&["--goal", "1,2"])].concat(), "");
    assert_eq!(o.code, 1);
    assert_eq!(error_kind(&o), "malformed_goal");
    let o = run(dir, &[&["solve"][..], &args(&["--goal", "0.5,0,0", "--chain", "spatial4"])].concat(), "");
    assert_eq!(error_kind(&o), "artifact_mismatch");
    let o = run(dir, &[&["solve"][..], &args(&["--goal", "0.5,0,0", "--selector", "nth:999"])].concat(), "");
    assert_eq!(error_kind(&o), "selector_out_of_range");
    let o = run(dir, &["solve", "--goal", "0.5,0,0", "--model", "{dir}/missing.bin", "--dict", "{dir}/dict.bin"], "");
    assert_eq!(error_kind(&o), "io");
    let o = run(dir, &["solve", "--goal", "0.5,0,0", "--model", "{dir}/same.bin", "--dict", "{dir}/same.bin"], "");
    assert_eq!(error_kind(&o), "config");
}

#[test]
fn usage_errors_are_json() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["fly"], "");
    assert_eq!(o.code, 2);
    assert_eq!(error_kind(&o), "usage");
    let o = run(tmp.path(), &["eval", "everything"], "");
    assert_eq!(o.code, 2);
    let o = run(tmp.path(), &["--help"], "");
    assert_eq!(o.code, 0);
    assert!(o.stdout.contains("build-index"));
}

#[test]
fn dense_eval_trains_its_own_model() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let common = ["--step-deg", "60", "--encoder-hidden", "8", "--decoder-hidden", "8", "--index-dim", "3", "--epochs", "2"];
    let args = |cmd: &[&'static str], extra: &[&'static str]| [cmd, &common[..], extra, &PATHS[..]].concat();
    ok(dir, &args(&["collect"], &[]));
    ok(dir, &args(&["train"], &[]));
    ok(dir, &args(&["build-index"], &[]));
    let o = run(dir, &args(&["eval", "dense"], &["--out", "{dir}/dense.json"]), "");
    assert_eq!(error_kind(&o), "config");
    ok(dir, &args(&["eval", "dense"], &["--window", "0:10,0:10,0:10", "--fine-step-deg", "5", "--samples", "3", "--out", "{dir}/dense.json"]));
    let report = EvalReport::load(ReportFormat::Json, std::fs::File::open(dir.join("dense.json")).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.config["window_deg"], "0:10;0:10;0:10");
}
