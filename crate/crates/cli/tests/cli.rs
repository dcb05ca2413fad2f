use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn neon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neon"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let f = fixtures();
    let p = dir.join("run.toml");
    fs::write(
        &p,
        format!(
            "seed = 9\nmethods = [\"original\", \"neon_icl\"]\n{extra}\n[data]\ntrain = \"{}\"\ntest = \"{}\"\nlimit = 5\n",
            f.join("comve_train.csv").display(),
            f.join("comve_test.csv").display()
        ),
    )
    .unwrap();
    p
}

#[test]
fn run_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("run");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());

    let r = neon(&["run", "-c", c, "-o", o]);
    assert_eq!(
        r.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&r.stderr)
    );
    assert!(stdout(&r).contains("neon_icl"));
    for f in [
        "manifest.json",
        "pairs.jsonl",
        "instantiations/icl.jsonl",
        "records/neon_icl.jsonl",
        "report.csv",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }

    let again = neon(&["score", "-c", c, "-o", o]);
    assert_eq!(again.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&again.stderr).contains("ran []"));

    let csv = tmp.path().join("table.csv");
    let rep = neon(&["report", o, "--csv", csv.to_str().unwrap()]);
    assert_eq!(rep.status.code(), Some(0));
    let text = stdout(&rep);
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().next().unwrap().contains("BLEU"));
    assert!(csv.is_file());
}

#[test]
fn stage_subcommands_stop_early() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("run");
    let r = neon(&[
        "instantiate",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(0));
    assert!(out.join("instantiations/icl.jsonl").is_file());
    assert!(!out.join("records").exists());
}

#[test]
fn validation_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("run");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    assert_eq!(
        neon(&["run", "-c", "/nonexistent.toml", "-o", o])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        neon(&["run", "-c", c, "-o", o, "--set", "ensemble_size=0"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        neon(&["run", "-c", c, "-o", o, "--set", "bogus=1"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        neon(&["run", "-c", c, "-o", o, "--sweep", "ensemble_size"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(neon(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(neon(&["report", o]).status.code(), Some(1));
    assert_eq!(neon(&["--help"]).status.code(), Some(0));
    assert!(!out.exists() || !out.join("pairs.jsonl").exists());
}

#[test]
fn runtime_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    // nothing listens on port 9 of localhost
    let cfg = write_config(
        tmp.path(),
        "[gateway]\nbackend = \"http\"\nurl = \"http://127.0.0.1:9\"\nretries = 0\ntimeout_secs = 2",
    );
    let out = tmp.path().join("run");
    let r = neon(&[
        "run",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("phase1"));
}

#[test]
fn sweep_writes_one_run_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("sweep");
    let r = neon(&[
        "run",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
        "--sweep",
        "ensemble_size=1,2",
    ]);
    assert_eq!(
        r.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&r.stderr)
    );
    assert!(out.join("ensemble_size-1/report.csv").is_file());
    assert!(out.join("ensemble_size-2/report.csv").is_file());
    assert_eq!(
        fs::read_to_string(out.join("report.txt"))
            .unwrap()
            .lines()
            .count(),
        5
    );
}

#[test]
fn eval_session_without_server() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("store");
    let s = store.to_str().unwrap();
    let sets = tmp.path().join("sets.jsonl");
    let lines: Vec<String> = (0..2)
        .map(|i| {
            format!(
                r#"{{"source_id":"c{i}","statement":"He drinks a rock {i}.","premise":null,"system":"cgmh","instantiations":["He drinks milk.","He drinks tea."]}}"#
            )
        })
        .collect();
    fs::write(&sets, lines.join("\n") + "\n").unwrap();
    let r = neon(&[
        "eval",
        "create",
        "--store",
        s,
        "--protocol",
        "instantiation-quality",
        "--sets",
        sets.to_str().unwrap(),
        "--items",
        "2",
        "--annotators",
        "ann1",
    ]);
    assert_eq!(
        r.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&r.stderr)
    );
    let v: serde_json::Value = serde_json::from_str(&stdout(&r)).unwrap();
    let id = v["session_id"].as_str().unwrap().to_string();

    let resp = r#"{"acceptability":"accept","grammaticality":3,"factuality":3,"diversity":2,"commonality":3}"#;
    loop {
        let n: serde_json::Value = serde_json::from_str(&stdout(&neon(&[
            "eval",
            "next",
            "--store",
            s,
            "--session",
            &id,
            "--annotator",
            "ann1",
        ])))
        .unwrap();
        if n["done"].as_bool().unwrap() {
            break;
        }
        let text = n.to_string();
        assert!(!text.contains("cgmh"), "{text}");
        let item = n["item"]["item_id"].as_str().unwrap();
        let sub = neon(&[
            "eval",
            "submit",
            "--store",
            s,
            "--session",
            &id,
            "--annotator",
            "ann1",
            "--item",
            item,
            "--responses",
            resp,
        ]);
        assert_eq!(sub.status.code(), Some(0));
    }
    let dup = neon(&[
        "eval",
        "submit",
        "--store",
        s,
        "--session",
        &id,
        "--annotator",
        "ann1",
        "--item",
        "item-001",
        "--responses",
        resp,
    ]);
    assert_eq!(dup.status.code(), Some(1));
    let rep = neon(&["eval", "report", "--store", s, "--session", &id, "--json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&rep)).unwrap();
    assert_eq!(v["completed"], 2);
    assert_eq!(v["aspects"][0]["votes"][0]["percent"], 100.0);
}
