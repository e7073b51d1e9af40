use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use wsml::dataset::{load_dataset, save_dataset};
use wsml::LabelState;

fn wsml(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsml"))
        .current_dir(dir)
        .args(args)
        .env("WSML_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = wsml(dir, args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}\nstderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    wsml(dir, args).status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

fn without_cfg(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with("#cfg "))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Directory with `full.wsml` (N=200, D=6, K=10), `test.wsml` and the
/// single-positive `sp.wsml`.
fn fixture() -> TempDir {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "gen",
            "--n",
            "200",
            "--dim",
            "6",
            "--classes",
            "10",
            "--pos-rate",
            "0.3",
            "--seed",
            "3",
            "--out",
            "full.wsml",
            "--test-n",
            "80",
            "--test-out",
            "test.wsml",
        ],
    );
    ok(
        d,
        &[
            "partialize",
            "--in",
            "full.wsml",
            "--mode",
            "single-positive",
            "--seed",
            "3",
            "--out",
            "sp.wsml",
        ],
    );
    tmp
}

fn train(d: &Path, prefix: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        "sp.wsml",
        "--test",
        "test.wsml",
        "--epochs",
        "4",
        "--hidden",
        "16",
        "--seed",
        "5",
        "--out-prefix",
        prefix,
    ];
    args.extend_from_slice(extra);
    ok(d, &args)
}

fn json(d: &Path, name: &str) -> serde_json::Value {
    serde_json::from_str(&read(d, name)).unwrap()
}

#[test]
fn gen_writes_header_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let args = |out: &'static str| {
        vec![
            "gen",
            "--n",
            "2000",
            "--dim",
            "20",
            "--classes",
            "10",
            "--pos-rate",
            "0.3",
            "--seed",
            "1",
            "--out",
            out,
        ]
    };
    ok(d, &args("a.wsml"));
    ok(d, &args("b.wsml"));
    let a = std::fs::read(d.join("a.wsml")).unwrap();
    assert!(
        a == std::fs::read(d.join("b.wsml")).unwrap(),
        "outputs differ"
    );
    let text = String::from_utf8(a).unwrap();
    let content: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .take(2)
        .collect();
    assert_eq!(content, ["WSML/1", "2000 20 10"]);
    assert!(text.starts_with("#cfg "));
    let ds = load_dataset(d.join("a.wsml")).unwrap();
    assert!(ds.is_fully_observed());
    assert!(ds.truth().is_some());
}

#[test]
fn gen_usage_errors() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    assert_eq!(
        code(
            d,
            &[
                "gen",
                "--n",
                "10",
                "--dim",
                "2",
                "--classes",
                "3",
                "--pos-rate",
                "0.5",
                "--seed",
                "1"
            ]
        ),
        1
    );
    assert_eq!(
        code(
            d,
            &[
                "gen",
                "--n",
                "10",
                "--dim",
                "2",
                "--classes",
                "3",
                "--pos-rate",
                "1.5",
                "--seed",
                "1",
                "--out",
                "x"
            ]
        ),
        1
    );
    assert_eq!(
        code(
            d,
            &[
                "gen",
                "--n",
                "10",
                "--dim",
                "2",
                "--classes",
                "3",
                "--pos-rate",
                "0.5",
                "--seed",
                "1",
                "--out",
                "x",
                "--bogus"
            ]
        ),
        1
    );
    assert_eq!(code(d, &["frobnicate"]), 1);
    assert_eq!(code(d, &[]), 1);
    assert_eq!(code(d, &["--help"]), 0);
}

#[test]
fn partialize_cardinalities() {
    let tmp = fixture();
    let d = tmp.path();
    let sp = load_dataset(d.join("sp.wsml")).unwrap();
    assert_eq!(sp.observed_count(), 200);
    assert_eq!(sp.count_state(LabelState::ObsPos), 200);
    assert!(sp.truth().is_some());

    ok(
        d,
        &[
            "partialize",
            "--in",
            "full.wsml",
            "--mode",
            "fraction",
            "--fraction",
            "0.05",
            "--seed",
            "2",
            "--out",
            "fr.wsml",
        ],
    );
    let fr = load_dataset(d.join("fr.wsml")).unwrap();
    assert_eq!(fr.observed_count(), 100);
    assert!(read(d, "fr.wsml").starts_with("#cfg "));
}

#[test]
fn partialize_errors() {
    let tmp = fixture();
    let d = tmp.path();
    assert_eq!(
        code(
            d,
            &[
                "partialize",
                "--in",
                "full.wsml",
                "--mode",
                "fraction",
                "--seed",
                "1",
                "--out",
                "x"
            ]
        ),
        1
    );
    assert_eq!(
        code(
            d,
            &[
                "partialize",
                "--in",
                "full.wsml",
                "--mode",
                "half",
                "--seed",
                "1",
                "--out",
                "x"
            ]
        ),
        1
    );
    assert_eq!(
        code(
            d,
            &[
                "partialize",
                "--in",
                "missing.wsml",
                "--mode",
                "single-positive",
                "--seed",
                "1",
                "--out",
                "x"
            ]
        ),
        2
    );

    let full = load_dataset(d.join("full.wsml")).unwrap();
    save_dataset(&full.without_truth(), d.join("notruth.wsml")).unwrap();
    assert_eq!(
        code(
            d,
            &[
                "partialize",
                "--in",
                "notruth.wsml",
                "--mode",
                "single-positive",
                "--seed",
                "1",
                "--out",
                "x"
            ]
        ),
        2
    );
}

#[test]
fn train_outputs_and_best_epoch_selection() {
    let tmp = fixture();
    let d = tmp.path();
    train(d, "ct", &["--scheme", "ll-ct", "--delta-rel", "2"]);
    for f in ["ct.metrics.csv", "ct.model"] {
        assert!(read(d, f).starts_with("#cfg "), "{f}");
    }
    let report = json(d, "ct.report.json");
    assert_eq!(report["cfg"]["train"]["scheme"]["scheme"], "ll-ct");
    assert!(json(d, "ct.tracker.json")["cfg"].is_object());

    let csv = read(d, "ct.metrics.csv");
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(
        lines.next().unwrap(),
        "epoch,train_loss,val_map,flags,flag_precision,cum_corrections,threshold_min"
    );
    let maps: Vec<f64> = lines
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(maps.len(), 4);
    let best = maps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let first_best = maps.iter().position(|&m| m == best).unwrap() + 1;
    assert_eq!(report["best_epoch"].as_u64().unwrap() as usize, first_best);
    assert_eq!(report["best_val_map"].as_f64().unwrap(), best);
    assert!(report["test_map"].as_f64().is_some());
}

#[test]
fn degenerate_schemes_give_identical_metrics() {
    let tmp = fixture();
    let d = tmp.path();
    train(d, "naive", &["--scheme", "naive-an"]);
    train(d, "llr0", &["--scheme", "ll-r", "--delta-rel", "0"]);
    train(d, "lsan0", &["--scheme", "lsan", "--eps-smooth", "0"]);
    let naive = without_cfg(&read(d, "naive.metrics.csv"));
    assert_eq!(naive, without_cfg(&read(d, "llr0.metrics.csv")));
    assert_eq!(naive, without_cfg(&read(d, "lsan0.metrics.csv")));
    assert_eq!(
        without_cfg(&read(d, "naive.model")),
        without_cfg(&read(d, "llr0.model"))
    );
}

#[test]
fn train_subsample_and_flag_handling() {
    let tmp = fixture();
    let d = tmp.path();
    let out = train(
        d,
        "sub",
        &["--scheme", "ll-r", "--subsample", "0.1", "--r0", "2.0"],
    );
    assert!(stderr(&out).contains("--r0"));
    let report = json(d, "sub.report.json");
    assert_eq!(report["n_samples"], 20);
    assert_eq!(report["config"]["scheme"]["r0"], 1.5);
    let tracker = json(d, "sub.tracker.json");
    assert_eq!(
        tracker["rows"].as_array().unwrap().len(),
        tracker["n"].as_u64().unwrap() as usize
    );

    let base = [
        "train",
        "--data",
        "sp.wsml",
        "--seed",
        "1",
        "--out-prefix",
        "x",
    ];
    let with = |extra: &[&'static str]| {
        let mut v = base.to_vec();
        v.extend_from_slice(extra);
        v
    };
    assert_eq!(code(d, &with(&["--scheme", "ll-q"])), 1);
    assert_eq!(code(d, &with(&["--scheme", "ll-r", "--epochs", "0"])), 1);
    assert_eq!(
        code(d, &with(&["--scheme", "ll-r", "--subsample", "1.5"])),
        1
    );
    assert_eq!(code(d, &with(&["--scheme", "ll-r", "--arch", "resnet"])), 1);
    assert_eq!(
        code(
            d,
            &[
                "train",
                "--data",
                "nope.wsml",
                "--scheme",
                "ll-r",
                "--seed",
                "1",
                "--out-prefix",
                "x"
            ]
        ),
        2
    );
}

#[test]
fn eval_groups_and_phase_table() {
    let tmp = fixture();
    let d = tmp.path();
    train(d, "nv", &["--scheme", "naive-an"]);
    let e = |extra: &[&str], out: &str| {
        let mut args = vec![
            "eval",
            "--model",
            "nv.model",
            "--data",
            "test.wsml",
            "--out",
            out,
        ];
        args.extend_from_slice(extra);
        ok(d, &args);
        json(d, out)
    };
    let one = e(&["--groups", "1"], "g1.json");
    assert_eq!(one["groups"][0]["map"], one["ap"]["map"]);
    assert_eq!(one["groups"][0]["categories"].as_array().unwrap().len(), 10);

    let five = e(&["--groups", "5", "--counts-from", "full.wsml"], "g5.json");
    let groups = five["groups"].as_array().unwrap();
    assert_eq!(groups.len(), 5);
    assert!(groups
        .iter()
        .all(|g| g["categories"].as_array().unwrap().len() == 2));
    let observed = e(&["--groups", "2", "--group-key", "observed"], "go.json");
    assert_eq!(observed["groups"].as_array().unwrap().len(), 2);

    let out = ok(
        d,
        &[
            "eval",
            "--model",
            "nv.model",
            "--data",
            "sp.wsml",
            "--tracker",
            "nv.tracker.json",
            "--phase-table",
        ],
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let phase = &v["phase"];
    let tp = phase["TP"]["count"].as_u64().unwrap();
    let tn = phase["TN"]["count"].as_u64().unwrap();
    let fneg = phase["FN"]["count"].as_u64().unwrap();
    let n_train = json(d, "nv.report.json")["n_train"].as_u64().unwrap();
    assert_eq!(tp, n_train);
    assert_eq!(tp + tn + fneg, n_train * 10);
    assert!(stderr(&out).contains("regular"));
}

#[test]
fn eval_errors() {
    let tmp = fixture();
    let d = tmp.path();
    train(d, "nv", &["--scheme", "naive-an"]);
    assert_eq!(
        code(
            d,
            &[
                "eval",
                "--model",
                "nv.model",
                "--data",
                "test.wsml",
                "--phase-table"
            ]
        ),
        1
    );
    assert_eq!(
        code(
            d,
            &[
                "eval",
                "--model",
                "nv.model",
                "--data",
                "test.wsml",
                "--groups",
                "11"
            ]
        ),
        1
    );
    let test = load_dataset(d.join("test.wsml")).unwrap();
    save_dataset(&test.without_truth(), d.join("nt.wsml")).unwrap();
    assert_eq!(
        code(d, &["eval", "--model", "nv.model", "--data", "nt.wsml"]),
        2
    );
    assert_eq!(
        code(
            d,
            &["eval", "--model", "missing.model", "--data", "test.wsml"]
        ),
        2
    );
}

fn sweep_rows(d: &Path, name: &str) -> Vec<Vec<String>> {
    let text = read(d, name);
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("#cfg "));
    assert_eq!(
        lines.next().unwrap(),
        "value,best_val_map,best_epoch,test_map,n_effective"
    );
    lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn sweep_delta_rel_and_subsample() {
    let tmp = fixture();
    let d = tmp.path();
    let common = [
        "--data", "sp.wsml", "--scheme", "ll-r", "--seed", "4", "--epochs", "2", "--hidden", "8",
    ];
    let sweep = |param: &str, values: &str, out: &str| {
        let mut args = vec!["sweep", "--param", param, "--values", values, "--out", out];
        args.extend_from_slice(&common);
        wsml(d, &args)
    };
    assert_eq!(
        sweep("delta-rel", "0.5,0.1,0.3,0.2,0.4", "dr.csv")
            .status
            .code(),
        Some(0)
    );
    let rows = sweep_rows(d, "dr.csv");
    let values: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(values, ["0.1", "0.2", "0.3", "0.4", "0.5"]);

    assert_eq!(
        sweep("subsample", "0.1,0.5,1.0", "ss.csv").status.code(),
        Some(0)
    );
    let rows = sweep_rows(d, "ss.csv");
    let n_eff: Vec<&str> = rows.iter().map(|r| r[4].as_str()).collect();
    assert_eq!(n_eff, ["20", "100", "200"]);

    let dup = sweep("delta-rel", "0.1,0.2,0.2", "x.csv");
    assert_eq!(dup.status.code(), Some(1));
    assert!(stderr(&dup).contains("0.2"));
    assert_eq!(sweep("delta-rel", "", "x.csv").status.code(), Some(1));
    assert_eq!(sweep("subsample", "0,0.5", "x.csv").status.code(), Some(1));
    assert!(!d.join("x.csv").exists());
}

#[test]
fn sweep_rows_match_individual_runs() {
    let tmp = fixture();
    let d = tmp.path();
    ok(
        d,
        &[
            "sweep",
            "--param",
            "delta-rel",
            "--values",
            "0.4,0.2",
            "--data",
            "sp.wsml",
            "--scheme",
            "ll-ct",
            "--seed",
            "7",
            "--epochs",
            "3",
            "--hidden",
            "8",
            "--out",
            "s.csv",
        ],
    );
    let rows = sweep_rows(d, "s.csv");
    for (i, delta) in ["0.2", "0.4"].iter().enumerate() {
        let seed = (7 + i).to_string();
        ok(
            d,
            &[
                "train",
                "--data",
                "sp.wsml",
                "--scheme",
                "ll-ct",
                "--delta-rel",
                delta,
                "--seed",
                &seed,
                "--epochs",
                "3",
                "--hidden",
                "8",
                "--out-prefix",
                "one",
            ],
        );
        let report = json(d, "one.report.json");
        assert_eq!(rows[i][0], *delta);
        assert_eq!(
            rows[i][1].parse::<f64>().unwrap(),
            report["best_val_map"].as_f64().unwrap()
        );
        assert_eq!(rows[i][2], report["best_epoch"].to_string());
    }
}
