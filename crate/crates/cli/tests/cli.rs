use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn naer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_naer")).args(args).output().expect("spawn naer")
}

fn ok(args: &[&str]) -> Value {
    let out = naer(args);
    assert!(
        out.status.success(),
        "naer {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn error_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic corpus taken through synth, label, split and train.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn data_args(&self) -> Vec<String> {
        ["--anomalies", "syn/anomalies.gsk", "--labels", "lab/labels.csv", "--split", "split.json"]
            .iter()
            .enumerate()
            .map(|(i, a)| if i % 2 == 1 { s(&self.p(a)).to_string() } else { a.to_string() })
            .collect()
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg = root.join("cfg.json");
        std::fs::write(
            &cfg,
            r#"{"split": {"test_start": "2011-01-01", "test_end": "2012-12-31", "min_years": 3},
                "train": {"max_epochs": 2, "model": {"in_channels": 6, "height": 16, "width": 32,
                  "blocks": [{"deformable": true, "filters": 4}, {"deformable": true, "filters": 4}],
                  "kernel": 3, "dropout": 0.1, "fc_width": 16, "classes": 4, "pool_stride": 2,
                  "leaky_slope": 0.01, "bn_momentum": 0.1, "bn_eps": 1e-5}},
                "interpret": {"samples": 4, "steps": 8}}"#,
        )
        .unwrap();
        let f = Fixture { _dir: dir, root };
        let c = s(&cfg).to_string();
        ok(&["--seed", "3", "synth", "--out-dir", s(&f.p("syn")), "--days", "1500", "--start-year", "2002", "--spacing", "11.25"]);
        ok(&["--seed", "3", "--config", &c, "label", "--anomalies", s(&f.p("syn/anomalies.gsk")), "--out-dir", s(&f.p("lab"))]);
        let syn = |n: &str| s(&f.p(&format!("syn/{n}.csv"))).to_string();
        ok(&[
            "--seed", "3", "--config", &c, "split", "--anomalies", s(&f.p("syn/anomalies.gsk")),
            "--enso", &syn("enso"), "--pdo", &syn("pdo"), "--amo", &syn("amo"), "--split", s(&f.p("split.json")),
        ]);
        let mut args = vec!["--seed".to_string(), "3".into(), "--config".into(), c.clone(), "train".into()];
        args.extend(f.data_args());
        args.extend(["--lead", "5", "--out-dir", s(&f.p("ck"))].map(String::from));
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
        f
    })
}

fn config(f: &Fixture) -> String {
    s(&f.p("cfg.json")).to_string()
}

#[test]
fn pipeline_emits_all_four_models() {
    let f = fixture();
    let c = config(f);
    let metrics = f.p("metrics.json");
    let mut args: Vec<String> = ["--seed", "3", "--config", &c, "evaluate", "--lead", "5"].map(String::from).to_vec();
    args.extend(f.data_args());
    args.extend(["--checkpoint", s(&f.p("ck/model_lead05.gsk")), "--output", s(&metrics), "--curves-dir", s(&f.p("curves"))].map(String::from));
    let out = naer(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report: Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["lead"], 5);
    for model in ["decnn", "persistence", "climatology", "logreg"] {
        let m = &report["models"][model];
        for key in ["accuracy", "weighted_auc", "csi", "brier"] {
            let v = m[key].as_f64().unwrap_or_else(|| panic!("{model}.{key} missing"));
            assert!((0.0..=1.0).contains(&v), "{model}.{key} = {v}");
        }
        assert_eq!(m["n"], report["models"]["decnn"]["n"]);
    }
    assert_eq!(report["config"]["seed"], 3);
    assert_eq!(report["config"]["pipeline"]["split"]["test_end"], "2012-12-31");

    let roc = std::fs::read_to_string(f.p("curves/roc.csv")).unwrap();
    assert!(roc.starts_with("model,class,threshold,pofd,pod\n"));
    assert!(std::fs::read_to_string(f.p("curves/diagram.csv")).unwrap().lines().count() > 4);

    // Same inputs and seed, same bytes.
    let again = f.p("metrics_again.json");
    let pos = args.iter().position(|a| a == s(&metrics)).unwrap();
    args[pos] = s(&again).to_string();
    naer(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(std::fs::read(&metrics).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn persistence_at_lead_zero_is_perfect() {
    let f = fixture();
    let r = ok(&["evaluate", "--model", "persistence", "--lead", "0", "--labels", s(&f.p("lab/labels.csv"))]);
    assert_eq!(r["models"]["persistence"]["accuracy"], 1.0);
    assert!(r["models"].get("decnn").is_none());
}

#[test]
fn explain_writes_field_and_map_pair() {
    let f = fixture();
    let c = config(f);
    let dir = f.p("explain");
    let r = ok(&[
        "--config", &c, "explain", "--checkpoint", s(&f.p("ck/model_lead05.gsk")), "--anomalies", s(&f.p("syn/anomalies.gsk")),
        "--labels", s(&f.p("lab/labels.csv")), "--date", "2012-01-10", "--lead", "5", "--method", "sgsq", "--out-dir", s(&dir),
    ]);
    assert_eq!(r["method"], "sgsq");
    let gsk = dir.join("attribution_2012-01-10_sgsq.gsk");
    let info = ok(&["inspect", s(&gsk)]);
    let names: Vec<&str> = info["arrays"].as_array().unwrap().iter().map(|a| a["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["attribution", "input"]);
    assert_eq!(info["meta"]["kind"], "attribution");

    let csv = std::fs::read_to_string(dir.join("attribution_2012-01-10_sgsq.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("variable,lat,lon,input,attribution"));
    let attr: Vec<f64> = lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(attr.len(), 6 * 16 * 32);
    assert!(attr.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(attr.contains(&1.0));
}

#[test]
fn label_and_split_are_idempotent() {
    let f = fixture();
    let c = config(f);
    let out = f.p("lab2");
    ok(&["--seed", "3", "--config", &c, "label", "--anomalies", s(&f.p("syn/anomalies.gsk")), "--out-dir", s(&out)]);
    for file in ["labels.csv", "eofs.gsk", "centroids.gsk", "labeling.json"] {
        assert_eq!(std::fs::read(f.p("lab").join(file)).unwrap(), std::fs::read(out.join(file)).unwrap(), "{file}");
    }
    let syn = |n: &str| s(&f.p(&format!("syn/{n}.csv"))).to_string();
    let plan = f.p("split2.json");
    ok(&[
        "--seed", "3", "--config", &c, "split", "--anomalies", s(&f.p("syn/anomalies.gsk")),
        "--enso", &syn("enso"), "--pdo", &syn("pdo"), "--amo", &syn("amo"), "--split", s(&plan),
    ]);
    assert_eq!(std::fs::read(f.p("split.json")).unwrap(), std::fs::read(&plan).unwrap());
}

#[test]
fn finetuning_from_a_checkpoint() {
    let f = fixture();
    let c = config(f);
    let mut args: Vec<String> = ["--seed", "4", "--config", &c, "train", "--leads", "4,6", "--epochs", "1"].map(String::from).to_vec();
    args.extend(f.data_args());
    args.extend(["--pretrain-from", s(&f.p("ck/model_lead05.gsk")), "--out-dir", s(&f.p("ft"))].map(String::from));
    let r = ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let runs = r["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    for (run, lead) in runs.iter().zip([4, 6]) {
        assert_eq!(run["lead"], lead);
        assert_eq!(run["stage"], "finetuned");
    }
    assert!(f.p("ft/model_lead06.gsk").exists());
    assert!(f.p("ft/log_lead04.csv").exists());
}

#[test]
fn failures_are_reported_as_json() {
    let f = fixture();
    let c = config(f);
    let dir = tempfile::tempdir().unwrap();

    let bad_cfg = dir.path().join("bad.json");
    std::fs::write(&bad_cfg, r#"{"train": {"lead_time": 5}}"#).unwrap();
    let e = error_json(&naer(&["--config", s(&bad_cfg), "inspect", "x.gsk"]));
    assert_eq!(e["error"]["kind"], "config");
    assert!(e["error"]["message"].as_str().unwrap().contains("lead_time"));

    let e = error_json(&naer(&["inspect", s(&dir.path().join("missing.gsk"))]));
    assert_eq!(e["error"]["kind"], "missing_file");

    let mut args: Vec<String> = ["--config", &c, "train", "--lead", "16", "--out-dir", s(dir.path())].map(String::from).to_vec();
    args.extend(f.data_args());
    let e = error_json(&naer(&args.iter().map(String::as_str).collect::<Vec<_>>()));
    assert_eq!(e["error"]["kind"], "invalid_argument");

    let e = error_json(&naer(&[
        "explain", "--checkpoint", s(&f.p("ck/model_lead05.gsk")), "--anomalies", s(&f.p("syn/anomalies.gsk")),
        "--date", "2012-01-10", "--lead", "3", "--out-dir", s(dir.path()),
    ]));
    assert!(e["error"]["message"].as_str().unwrap().contains("lead 5"));

    // A checkpoint for a different grid cannot be finetuned on this data.
    let coarse = dir.path().join("coarse.gsk");
    ok(&["convert", "--input", s(&f.p("syn/anomalies.gsk")), "--output", s(&coarse), "--spacing", "22.5"]);
    let mut args: Vec<String> = ["--config", &c, "train", "--lead", "5", "--out-dir", s(dir.path())].map(String::from).to_vec();
    args.extend(["--anomalies", s(&coarse), "--labels", s(&f.p("lab/labels.csv")), "--split", s(&f.p("split.json"))].map(String::from));
    args.extend(["--pretrain-from", s(&f.p("ck/model_lead05.gsk"))].map(String::from));
    let out = naer(&args.iter().map(String::as_str).collect::<Vec<_>>());
    error_json(&out);

    let out = naer(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "usage");
}

#[test]
fn help_lists_every_subcommand() {
    let out = naer(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["convert", "inspect", "anomaly", "label", "split", "train", "hpo", "evaluate", "explain", "synth"] {
        assert!(text.contains(cmd), "{cmd} missing from --help");
    }
}
