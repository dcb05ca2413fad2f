use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use neon_core::explain::Method;
use neon_core::pipeline::{self, report, RunConfig, RunOptions, Stage};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn config(extra: &[&str]) -> RunConfig {
    let f = fixtures();
    let toml = format!(
        r#"
task = "comve"
seed = 42
methods = ["original", "random", "retrieval_bm25", "retrieval_embed", "ground_truth", "top1", "neon_icl", "neon_cgmh"]

[data]
train = "{}"
test = "{}"
knowledge = "{}"
"#,
        f.join("comve_train.csv").display(),
        f.join("comve_test.csv").display(),
        f.join("omcs.txt").display()
    );
    let overrides: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
    RunConfig::from_toml_str(&toml, &overrides).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_run_is_deterministic_and_resumable() {
    let cfg = config(&[]);
    let gw = cfg.gateway.build().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));

    let start = Instant::now();
    let s = pipeline::run(&cfg, &a, &gw, &RunOptions::default()).unwrap();
    let elapsed = start.elapsed();
    assert_eq!(s.executed, Stage::ALL.to_vec());
    assert_eq!(s.reports.len(), Method::ALL.len());
    let manifest = pipeline::Manifest::load(&a).unwrap();
    let skipped = &manifest.stages[&Stage::Hints].counts;
    for r in &s.reports {
        assert_eq!(
            r.n_records + skipped[&format!("{}_skipped", r.method)],
            20,
            "{}",
            r.method
        );
        if !matches!(r.method, Method::NeonIcl | Method::NeonCgmh) {
            assert_eq!(r.n_records, 20, "{}", r.method);
        }
        for v in [r.bleu, r.rouge.rouge_l, r.bertscore_f1, r.sbert_cosine] {
            assert!((0.0..=100.0).contains(&v), "{} {v}", r.method);
        }
    }
    assert!(elapsed.as_secs() < 120, "{elapsed:?}");

    pipeline::run(&cfg, &b, &gw, &RunOptions::default()).unwrap();
    let (ta, tb) = (tree(&a), tree(&b));
    let names = |t: &[(String, Vec<u8>)]| t.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    assert_eq!(names(&ta), names(&tb));
    let differing: Vec<&String> = ta
        .iter()
        .zip(&tb)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| &x.0)
        .collect();
    assert!(differing.is_empty(), "{differing:?}");

    let again = pipeline::run(&cfg, &a, &gw, &RunOptions::default()).unwrap();
    assert!(again.executed.is_empty());
    assert_eq!(again.skipped, Stage::ALL.to_vec());
    assert_eq!(again.reports, s.reports);

    // a phase II change keeps phase I
    let cfg2 = config(&["template=instruction"]);
    let s2 = pipeline::run(&cfg2, &a, &gw, &RunOptions::default()).unwrap();
    assert_eq!(s2.skipped, vec![Stage::Ingest, Stage::Phase1, Stage::Hints]);
    assert_eq!(s2.executed, vec![Stage::Phase2, Stage::Metrics]);

    let forced = pipeline::run(
        &cfg2,
        &a,
        &gw,
        &RunOptions {
            force: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(forced.executed.len(), 5);

    let rows = report::collect_rows(&[&a, &b]).unwrap();
    assert_eq!(rows.len(), 16);
    assert!(rows[..8].iter().all(|r| r.run == "a"));
    assert!(rows[8..].iter().all(|r| r.run == "b"));
}

#[test]
fn neon_records_carry_ensemble_hints() {
    let cfg = config(&[
        "methods=[\"neon_cgmh\", \"top1\"]",
        "top1_from=\"cgmh\"",
        "ensemble_size=3",
    ]);
    let gw = cfg.gateway.build().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    pipeline::run(&cfg, tmp.path(), &gw, &RunOptions::default()).unwrap();
    let recs: Vec<neon_core::explain::ExplanationRecord> =
        neon_core::jsonl::read_jsonl(&tmp.path().join("records/neon_cgmh.jsonl")).unwrap();
    assert!(!recs.is_empty());
    assert!(recs.iter().all(|r| r.hints.len() == 3));
    let manifest = pipeline::Manifest::load(tmp.path()).unwrap();
    assert!(manifest.stages[&Stage::Phase1].counts["cgmh_instantiations"] > 0);
}

#[test]
fn sweep_reuses_upstream_stages() {
    let f = fixtures();
    let toml = format!(
        "methods = [\"neon_icl\"]\nseed = 3\n[data]\ntrain = \"{}\"\ntest = \"{}\"\nlimit = 6\n",
        f.join("comve_train.csv").display(),
        f.join("comve_test.csv").display()
    );
    let gw = RunConfig::default().gateway.build().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let values = pipeline::expand_values("2..3");
    let runs = pipeline::sweep(
        &toml,
        &f,
        &[],
        "ensemble_size",
        &values,
        tmp.path(),
        &gw,
        false,
    )
    .unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[1].skipped, vec![Stage::Ingest, Stage::Phase1]);
    assert!(tmp
        .path()
        .join("ensemble_size-3/instantiations/icl.jsonl")
        .is_file());
    let rows = report::read_csv(&tmp.path().join("report.csv")).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.run.as_str()).collect::<Vec<_>>(),
        ["ensemble_size-2", "ensemble_size-3"]
    );
}

#[test]
fn invalid_config_is_a_validation_error() {
    let cfg = config(&["methods=[]"]);
    let gw = cfg.gateway.build().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let e = pipeline::run(&cfg, tmp.path(), &gw, &RunOptions::default()).unwrap_err();
    assert!(e.is_validation());
}
