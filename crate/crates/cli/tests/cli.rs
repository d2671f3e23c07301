use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use reghal::simstudy::dgp::{gen_ate, gen_surv, AteDgp};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_reghal-tmle"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn simulate_ate_example_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "simulate-ate", "--dgp", "1", "--n", "500", "--reps", "5", "--targeting", "projection", "--seed", "7", "--out",
    ];
    let mut a = args.to_vec();
    a.push("a.csv");
    let out = run(dir.path(), &a);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("Abs_Bias"));
    let first = fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(text(&first).lines().count(), 6);

    let mut b = args.to_vec();
    b.push("b.csv");
    assert_eq!(run(dir.path(), &b).status.code(), Some(0));
    assert_eq!(first, fs::read(dir.path().join("b.csv")).unwrap());
}

#[test]
fn invalid_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["simulate-ate", "--n", "-3"],
        vec!["simulate-ate", "--n", "0"],
        vec!["simulate-ate", "--dgp", "3"],
        vec!["simulate-survival", "--step", "-1"],
        vec!["simulate-ate", "--bogus"],
        vec!["simulate-atmle", "--level", "1.5"],
        vec!["no-such-command"],
    ] {
        let out = run(dir.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(text(&out.stderr).contains("Usage"), "{args:?}: {}", text(&out.stderr));
    }
    let out = run(dir.path(), &["simulate-ate", "--targeting", "sideways", "--reps", "1", "--n", "50"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_sets_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.cfg"), "# small run\nn = 120\nreps=2\ntargeting=relaxed\nseed=3\nout=from_file.csv\n").unwrap();
    let out = run(d, &["simulate-ate", "--config", "run.cfg", "--reps", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let csv = fs::read_to_string(d.join("from_file.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("0,hal-tmle,120,relaxed,0,"));

    fs::write(d.join("bad.cfg"), "n=100\nwidth=3\n").unwrap();
    let out = run(d, &["simulate-ate", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("unknown config key 'width'"));

    fs::write(d.join("flag.cfg"), "timing=maybe\n").unwrap();
    assert_eq!(run(d, &["simulate-ate", "--config", "flag.cfg"]).status.code(), Some(2));
    assert_eq!(run(d, &["simulate-ate", "--config", "missing.cfg"]).status.code(), Some(2));
}

#[test]
fn summarize_agrees_with_the_in_process_summary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = run(
        d,
        &[
            "simulate-survival", "--n", "150", "--reps", "2", "--targeting", "projection,delta", "--fewer-intervals",
            "--band-draws", "1000", "--out", "raw.csv", "--summary-out", "s1.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let again = run(d, &["summarize", "raw.csv", "--out", "s2.csv"]);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(fs::read(d.join("s1.csv")).unwrap(), fs::read(d.join("s2.csv")).unwrap());
    assert_eq!(out.stdout, again.stdout);
    let raw = fs::read_to_string(d.join("raw.csv")).unwrap();
    assert_eq!(raw.lines().count(), 1 + 2 * 2 * 20);
}

#[test]
fn metadata_defaults_match_flag_documentation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = run(d, &["simulate-ate", "--n", "80", "--reps", "1", "--targeting", "relaxed", "--out", "r.csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("r.csv.meta.json")).unwrap()).unwrap();
    let help = text(&run(d, &["simulate-ate", "--help"]).stdout);
    let documented = |flag: &str| -> String {
        let line = help
            .lines()
            .skip_while(|l| !l.trim_start().starts_with(&format!("--{flag} ")))
            .find(|l| l.contains("[default: "))
            .unwrap_or_else(|| panic!("no documented default for --{flag}"));
        let start = line.find("[default: ").unwrap() + 10;
        line[start..line[start..].find(']').unwrap() + start].to_string()
    };
    for (key, value) in meta["settings"]["ate"].as_object().unwrap() {
        if key == "targeting" || value.is_null() || value.is_boolean() {
            continue;
        }
        let doc = documented(&key.replace('_', "-"));
        match value {
            serde_json::Value::Number(v) => assert_eq!(doc.parse::<f64>().unwrap(), v.as_f64().unwrap(), "{key}"),
            serde_json::Value::String(s) => assert_eq!(&doc, s, "{key}"),
            serde_json::Value::Bool(b) => assert!(!b, "{key} flags default to off"),
            other => panic!("unexpected {other}"),
        }
    }
    assert_eq!(documented("lambda"), "0.00001");
    assert_eq!(documented("ridge"), "0.000001");
    assert_eq!(documented("step"), "0.0001");
    assert_eq!(documented("trunc-lower"), "0.01");
    let surv_help = text(&run(d, &["simulate-survival", "--help"]).stdout);
    assert!(surv_help.contains("[default: 0.001]"));
}

#[test]
fn estimate_commands_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = gen_ate(AteDgp::One, 150, 5).unwrap();
    data.write_csv(fs::File::create(d.join("ate.csv")).unwrap()).unwrap();
    let out = run(d, &["estimate-ate", "ate.csv", "--targeting", "projection,standard"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let s = text(&out.stdout);
    let lines: Vec<&str> = s.lines().collect();
    assert!(lines[0].starts_with("targeting,psi,np_lo,np_hi"));
    assert!(lines[1].starts_with("projection,"));
    assert!(lines[2].starts_with("standard,"));

    let out = run(d, &["estimate-ate", "ate.csv", "--atmle", "--max-models", "4", "--targeting", "delta", "--out", "ladder.csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let ladder = fs::read_to_string(d.join("ladder.csv")).unwrap();
    assert!(ladder.starts_with("j,psi,L,U,iterations,basis_count,selected\n"));

    let surv = gen_surv(200, 9).unwrap();
    surv.write_csv(fs::File::create(d.join("surv.csv")).unwrap()).unwrap();
    let out = run(
        d,
        &["estimate-survival", "surv.csv", "--targeting", "delta", "--grid-size", "5", "--fewer-intervals", "--out", "curve.csv"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let curve = fs::read_to_string(d.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 6);
    assert!(curve.starts_with("s,S_hat,"));
}

#[test]
fn estimation_failures_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut csv = String::from("W1,A,Y\n");
    for i in 0..40 {
        csv.push_str(&format!("{},1,{}\n", i as f64 / 40.0, i % 3));
    }
    fs::write(d.join("one_arm.csv"), csv).unwrap();
    let out = run(d, &["estimate-ate", "one_arm.csv"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(text(&out.stderr).contains("one treatment arm"));

    let out = run(d, &["simulate-ate", "--n", "1", "--reps", "2", "--targeting", "relaxed", "--out", "f.csv"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(text(&out.stderr).contains("hal-tmle/relaxed: replications 0, 1"));
    assert!(d.join("f.csv").exists());
}
