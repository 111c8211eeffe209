use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = "\
# tiny desk config
lookback=32
horizon=8
patch_len=8
stride=4
period=8
trend_k=4
layers=1
heads=2
embed_dim=8
pool_size=6
top_k=2
prompt_len=2
epochs=2
batch=16
";

fn tempo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tempo")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cfg: PathBuf,
    a: PathBuf,
    b: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = root.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let a = root.join("a.csv");
    let b = root.join("b.csv");
    for (path, seed, slope) in [(&a, "0", "0"), (&b, "1", "0.01")] {
        let out = tempo(&[
            "synth", "--period", "8", "--length", "400", "--noise", "0.1", "--seed", seed, "--slope", slope, "--out",
            p(path),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    Fixture { _dir: dir, root, cfg, a, b }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().filter(|l| !l.trim().is_empty()).collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {stderr:?}");
    serde_json::from_str(lines[0]).unwrap()
}

/// Object keys appear in sorted order at every level.
fn assert_sorted(v: &Value) {
    match v {
        Value::Object(m) => {
            let keys: Vec<&String> = m.keys().collect();
            let mut sorted = keys.clone();
            sorted.sort();
            assert_eq!(keys, sorted);
            m.values().for_each(assert_sorted);
        }
        Value::Array(a) => a.iter().for_each(assert_sorted),
        _ => {}
    }
}

/// Textual key order of the raw JSON, which `Value` parsing would hide.
fn assert_text_sorted(text: &str) {
    let v: Value = serde_json::from_str(text).unwrap();
    assert_sorted(&v);
    let mut reparsed = serde_json::to_string_pretty(&v).unwrap();
    reparsed.push('\n');
    assert_eq!(text, reparsed);
}

#[test]
fn theory_check_all_passes() {
    let out = tempo(&["theory-check", "--suite", "all"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_text_sorted(&text);
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["checks"].as_array().unwrap().len() >= 3);
}

#[test]
fn zero_shot_target_in_sources_is_leakage() {
    let f = fixture();
    let sources = format!("{},{}", p(&f.a), p(&f.b));
    let out = tempo(&[
        "zero-shot", "--config", p(&f.cfg), "--sources", &sources, "--target", p(&f.a), "--out",
        p(&f.root.join("zs")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "leakage");
}

#[test]
fn config_errors_exit_one_and_name_the_key() {
    let f = fixture();
    let out = tempo(&["train", "--config", p(&f.cfg), "--data", p(&f.a), "--set", "lambda_dec=banana"]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_line(&out);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("lambda_dec"));

    let bad = f.root.join("typo.cfg");
    std::fs::write(&bad, "lamda_dec=0.1\n").unwrap();
    let out = tempo(&["train", "--config", p(&bad), "--data", p(&f.a)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out)["message"].as_str().unwrap().contains("lamda_dec"));

    let out = tempo(&["train", "--config", p(&f.cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out)["message"].as_str().unwrap().contains("data"));

    let out = tempo(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "usage");
}

#[test]
fn empty_config_file_means_defaults() {
    let f = fixture();
    let empty = f.root.join("empty.cfg");
    std::fs::write(&empty, "").unwrap();
    let out_dir = f.root.join("th");
    let out = tempo(&["theory-check", "--suite", "dft", "--config", p(&empty), "--out", p(&out_dir)]);
    assert!(out.status.success());
    let resolved = std::fs::read_to_string(out_dir.join("resolved.cfg")).unwrap();
    let lines: Vec<&str> = resolved.lines().collect();
    assert!(lines.contains(&"lambda_dec=0.01"));
    assert!(lines.contains(&"lookback=96"));
}

#[test]
fn divergence_exits_three() {
    let f = fixture();
    let out = tempo(&[
        "train", "--config", p(&f.cfg), "--data", p(&f.a), "--out", p(&f.root.join("div")), "--set", "lr=1e200",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"], "divergence");
}

#[test]
fn decompose_output_is_additive() {
    let f = fixture();
    let out_csv = f.root.join("comp.csv");
    let out = tempo(&["decompose", "--in", p(&f.a), "--period", "8", "--k", "4", "--out", p(&out_csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut r = csv::Reader::from_path(&out_csv).unwrap();
    assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), ["channel", "t", "x", "trend", "season", "residual"]);
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        let v: Vec<f64> = (2..6).map(|i| rec[i].parse().unwrap()).collect();
        assert!((v[1] + v[2] + v[3] - v[0]).abs() < 1e-10);
        rows += 1;
    }
    assert_eq!(rows, 400);
}

#[test]
fn train_writes_run_directory_and_is_reproducible() {
    let f = fixture();
    let input_before = std::fs::read(&f.a).unwrap();
    let run = |name: &str| {
        let dir = f.root.join(name);
        let out = tempo(&["train", "--config", p(&f.cfg), "--data", p(&f.a), "--out", p(&dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        dir
    };
    let (one, two) = (run("one"), run("two"));
    for file in [
        "resolved.cfg",
        "metrics.json",
        "predictions.csv",
        "checkpoint",
        "history.json",
        "plots/forecast.svg",
        "plots/forecast.csv",
        "plots/loss.svg",
        "plots/loss.csv",
    ] {
        let a = std::fs::read(one.join(file)).unwrap_or_else(|_| panic!("missing {file}"));
        let b = std::fs::read(two.join(file)).unwrap();
        if file == "resolved.cfg" {
            // Only the `out` line differs.
            let strip = |x: &[u8]| String::from_utf8_lossy(x).lines().filter(|l| !l.starts_with("out=")).collect::<Vec<_>>().join("\n");
            assert_eq!(strip(&a), strip(&b));
        } else {
            assert_eq!(a, b, "{file} differs between identical runs");
        }
    }
    let text = std::fs::read_to_string(one.join("metrics.json")).unwrap();
    assert_text_sorted(&text);
    let m: Value = serde_json::from_str(&text).unwrap();
    for key in ["variant", "mse", "mae", "abs_smape", "seed", "config_hash"] {
        assert!(m.get(key).is_some(), "metrics.json lacks {key}");
    }
    assert_eq!(m["variant"], "full");
    let resolved = std::fs::read_to_string(one.join("resolved.cfg")).unwrap();
    assert!(resolved.contains(&format!("# config_hash={}", m["config_hash"].as_str().unwrap())));

    let mut r = csv::Reader::from_path(one.join("predictions.csv")).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().take(7).collect::<Vec<_>>(),
        ["origin_t", "h", "y_true", "y_hat", "y_T", "y_S", "y_R"]
    );
    assert!(r.records().count() > 0);
    assert_eq!(std::fs::read(&f.a).unwrap(), input_before, "input file was modified");
}

#[test]
fn flag_overrides_file_in_resolved_echo() {
    let f = fixture();
    let dir = f.root.join("ovr");
    let out = tempo(&[
        "train", "--config", p(&f.cfg), "--data", p(&f.a), "--out", p(&dir), "--set", "epochs=1", "--seed", "7",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resolved = std::fs::read_to_string(dir.join("resolved.cfg")).unwrap();
    assert!(resolved.contains("\nepochs=1\n"));
    assert!(resolved.contains("\nseed=7\n"));
    assert!(resolved.contains("\nembed_dim=8\n"));
    assert_eq!(read_json(&dir.join("history.json"))["epochs"].as_array().unwrap().len(), 1);
}

#[test]
fn ablate_emits_four_rows_with_full_matching_train() {
    let f = fixture();
    let ab = f.root.join("ab");
    let out = tempo(&["ablate", "--config", p(&f.cfg), "--data", p(&f.a), "--out", p(&ab)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut r = csv::Reader::from_path(ab.join("ablation.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    let names: Vec<&str> = rows.iter().map(|r| r.get(0).unwrap()).collect();
    assert_eq!(names, ["full", "w/o Dec", "w/o Pro", "w/o Dec Loss"]);
    assert_eq!(read_json(&ab.join("metrics.json")).as_array().unwrap().len(), 4);

    let tr = f.root.join("tr");
    let out = tempo(&["train", "--config", p(&f.cfg), "--data", p(&f.a), "--out", p(&tr)]);
    assert!(out.status.success());
    let m = read_json(&tr.join("metrics.json"));
    assert_eq!(rows[0].get(1).unwrap(), m["mse"].as_f64().unwrap().to_string());

    let out = tempo(&["ablate", "--config", p(&f.cfg), "--data", p(&f.a), "--out", p(&ab), "--flags", "no_prompt"]);
    assert!(out.status.success());
    let mut r = csv::Reader::from_path(ab.join("ablation.csv")).unwrap();
    assert_eq!(r.records().count(), 2);
}

#[test]
fn eval_shap_forecast_and_prompt_stats_from_a_run() {
    let f = fixture();
    let run = f.root.join("run");
    let out = tempo(&["train", "--config", p(&f.cfg), "--data", p(&f.a), "--out", p(&run)]);
    assert!(out.status.success());
    let ckpt = run.join("checkpoint");
    let resolved_before = std::fs::read(run.join("resolved.cfg")).unwrap();

    let ev = f.root.join("ev");
    let out = tempo(&["eval", "--ckpt", p(&ckpt), "--data", p(&f.a), "--out", p(&ev)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // Same data and split as training: the same test metrics.
    assert_eq!(read_json(&ev.join("metrics.json"))["mse"], read_json(&run.join("metrics.json"))["mse"]);

    // Equal-length windows: the mean of per-window values at q=1 is the pooled value.
    let base = read_json(&ev.join("metrics.json"))["abs_smape"].as_f64().unwrap();
    for (q, dir) in [("1", "clip1"), ("0.5", "clip05")] {
        let d = f.root.join(dir);
        let out = tempo(&["eval", "--ckpt", p(&ckpt), "--data", p(&f.a), "--out", p(&d), "--smape-clip", q]);
        assert!(out.status.success());
        let m = read_json(&d.join("metrics.json"));
        assert_eq!(m["smape_clip"].as_f64().unwrap(), q.parse::<f64>().unwrap());
        let v = m["abs_smape"].as_f64().unwrap();
        if q == "1" {
            assert!((v - base).abs() < 1e-9 * base.max(1.0));
        } else {
            assert!(v <= base);
        }
    }

    let sh = f.root.join("sh");
    let out = tempo(&["shap", "--ckpt", p(&ckpt), "--data", p(&f.a), "--out", p(&sh), "--buckets", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut r = csv::Reader::from_path(sh.join("coalitions.csv")).unwrap();
    assert_eq!(r.records().count(), 8);
    let text = std::fs::read_to_string(sh.join("shapley.json")).unwrap();
    assert_text_sorted(&text);
    let rep: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(rep["buckets"].as_array().unwrap().len(), 2);
    let o = &rep["overall"];
    let sum = o["phi_trend"].as_f64().unwrap() + o["phi_season"].as_f64().unwrap() + o["phi_residual"].as_f64().unwrap();
    let gap = o["value_full"].as_f64().unwrap() - o["value_empty"].as_f64().unwrap();
    assert!((sum - gap).abs() < 1e-9);

    let out = tempo(&["shap", "--ckpt", p(&ckpt), "--data", p(&f.a), "--out", p(&f.root.join("shg")), "--via-gam"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(read_json(&f.root.join("shg/shapley.json"))["gam"].is_object());

    let fc = f.root.join("fc");
    let out = tempo(&["forecast", "--ckpt", p(&ckpt), "--data", p(&f.b), "--out", p(&fc)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut r = csv::Reader::from_path(fc.join("forecast.csv")).unwrap();
    assert_eq!(r.records().count(), 8);

    let out = tempo(&["prompt-stats", "--run", p(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut r = csv::Reader::from_path(run.join("prompt-stats/prompt_stats.csv")).unwrap();
    assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), ["index", "count", "component"]);
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3 * 6);
    let windows = csv::Reader::from_path(run.join("predictions.csv")).unwrap().records().count() / 8;
    let trend_total: u64 = rows.iter().filter(|r| &r[2] == "trend").map(|r| r[1].parse::<u64>().unwrap()).sum();
    assert_eq!(trend_total as usize, windows * 2);
    assert_eq!(std::fs::read(run.join("resolved.cfg")).unwrap(), resolved_before);
}

#[test]
fn synth_is_deterministic() {
    let f = fixture();
    let c = f.root.join("c.csv");
    let out = tempo(&[
        "synth", "--period", "8", "--length", "400", "--noise", "0.1", "--seed", "0", "--slope", "0", "--out", p(&c),
    ]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(&c).unwrap(), std::fs::read(&f.a).unwrap());
}
