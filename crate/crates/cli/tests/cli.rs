use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tvprofile::simulate::churn_scenario;

fn tvprofile(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvprofile"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn prepare_sessionizes_raw_logs() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.csv");
    fs::write(
        &log,
        "customer_id,EVENT_DT_TM,EVENT_ID,EVENT_SPEC_1,URL,GENRE\n\
         c1,2019-10-01 10:00:00,100,x,/home,1\n\
         c1,2019-10-01 10:00:04,100,x,/guide,2\n\
         c1,2019-10-01 10:00:09,100,x,/home,1\n\
         c1,2019-10-01 12:00:00,100,x,/home,3\n\
         c1,2019-10-01 12:00:02,999,x,/home,3\n\
         c1,2019-10-01 12:00:03,100,x,/guide,3\n\
         c2,2019-10-01 09:00:00,100,x,/home,4\n",
    )
    .unwrap();
    let clicks = dir.path().join("clicks.csv");
    fs::write(&clicks, "event_id\n100\n").unwrap();
    let contexts = dir.path().join("contexts.csv");
    fs::write(&contexts, "event_id,url,tag\n100,/home,HOME\n100,/guide,GUIDE\n").unwrap();
    let out = dir.path().join("journeys.jsonl");
    let tables = format!("{},{}", s(&clicks), s(&contexts));
    let o = tvprofile(&[
        "prepare",
        "--logs",
        s(&log),
        "--tables",
        &tables,
        "--gap-threshold-s",
        "1800",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].contains("\"customer_id\":\"c1\""));
    assert!(lines[0].contains("\"gap_s\":4.0"));
    assert!(lines[1].contains("GUIDE"));
}

#[test]
fn data_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.csv");
    fs::write(
        &log,
        "customer_id,EVENT_DT_TM,EVENT_ID,EVENT_SPEC_1,URL\nc1,yesterday,100,x,\n",
    )
    .unwrap();
    let clicks = dir.path().join("clicks.csv");
    fs::write(&clicks, "event_id\n100\n").unwrap();
    let contexts = dir.path().join("contexts.csv");
    fs::write(&contexts, "event_id,url,tag\n100,,HOME\n").unwrap();
    let tables = format!("{},{}", s(&clicks), s(&contexts));
    let out = dir.path().join("j.jsonl");
    let o = tvprofile(&[
        "prepare",
        "--logs",
        s(&log),
        "--tables",
        &tables,
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn usage_and_config_errors_exit_with_code_1() {
    let o = tvprofile(&["cluster", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mcmc.json");
    fs::write(&cfg, r#"{"n_iter": -5}"#).unwrap();
    let o = tvprofile(&[
        "fit",
        "--journeys",
        "x.jsonl",
        "--config",
        s(&cfg),
        "--out",
        "draws",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("n_iter"), "{}", stderr(&o));

    let o = tvprofile(&[
        "classify",
        "--profiles",
        s(&dir.path().join("profiles.csv")),
        "--out",
        s(&dir.path().join("report.csv")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("run profile first"), "{}", stderr(&o));
}

fn full_run(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let scenario = dir.join("scenario.json");
    fs::write(
        &scenario,
        serde_json::to_string(&churn_scenario(16, 6, 15, 7)).unwrap(),
    )
    .unwrap();
    let mcmc = dir.join("mcmc.json");
    fs::write(
        &mcmc,
        r#"{"n_adapt": 200, "n_burnin": 200, "n_iter": 400, "thin": 2, "n_chains": 2, "seed": 5}"#,
    )
    .unwrap();
    let p = |name: &str| dir.join(name);
    let steps: Vec<Vec<String>> = vec![
        vec![
            "simulate",
            "--scenario",
            s(&scenario),
            "--out",
            s(&p("journeys.jsonl")),
            "--truth",
            s(&p("truth.json")),
        ],
        vec![
            "fit",
            "--journeys",
            s(&p("journeys.jsonl")),
            "--config",
            s(&mcmc),
            "--out",
            s(&p("draws")),
        ],
        vec![
            "diagnose",
            "--draws",
            s(&p("draws")),
            "--out",
            s(&p("summary.csv")),
        ],
        vec![
            "profile",
            "--draws",
            s(&p("draws")),
            "--journeys",
            s(&p("journeys.jsonl")),
            "--out",
            s(&p("profiles.csv")),
        ],
        vec![
            "cluster",
            "--profiles",
            s(&p("profiles.csv")),
            "--k",
            "2",
            "--newick",
            s(&p("tree.nwk")),
            "--out",
            s(&p("dendrogram.json")),
        ],
        vec![
            "classify",
            "--profiles",
            s(&p("profiles.csv")),
            "--naive",
            s(&p("journeys.jsonl")),
            "--split",
            "0.7",
            "--seed",
            "42",
            "--methods",
            "svm,knn,rf,lasso",
            "--trees",
            "100",
            "--out",
            s(&p("report.csv")),
        ],
        vec![
            "report",
            "--summary",
            s(&p("summary.csv")),
            "--classification",
            s(&p("report.csv")),
            "--out",
            s(&p("report.txt")),
        ],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    for step in &steps {
        let args: Vec<&str> = step.iter().map(String::as_str).collect();
        let o = tvprofile(&args);
        assert!(o.status.success(), "{}: {}", step[0], stderr(&o));
    }
    let mut files = Vec::new();
    for name in [
        "journeys.jsonl",
        "truth.json",
        "draws/chain_1.csv",
        "draws/chain_2.csv",
        "summary.csv",
        "table1.txt",
        "profiles.csv",
        "dendrogram.json",
        "tree.nwk",
        "report.csv",
        "report.txt",
    ] {
        files.push((name.to_string(), fs::read(p(name)).unwrap()));
    }
    files
}

#[test]
fn subcommands_chain_and_reproduce() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = full_run(a.path());
    let second = full_run(b.path());
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        assert!(x == y, "{name} differs between runs");
    }
    let report = fs::read_to_string(a.path().join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 8);
    let text = fs::read_to_string(a.path().join("report.txt")).unwrap();
    assert!(text.contains("Estimate (sd)"));
    assert!(text.contains("Model-based"));
}

#[test]
fn run_subcommand_writes_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    let out = dir.path().join("out");
    let config = serde_json::json!({
        "seed": 3,
        "scenario": churn_scenario(12, 5, 12, 1),
        "mcmc": {"n_adapt": 100, "n_burnin": 100, "n_iter": 200, "thin": 2, "n_chains": 2},
        "classify": {"classifier": {"forest": {"n_trees": 50}}}
    });
    fs::write(&cfg, config.to_string()).unwrap();
    let o = tvprofile(&["run", "--config", s(&cfg), "--out-dir", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for stage in [
        "simulate", "fit", "diagnose", "profile", "cluster", "classify", "report",
    ] {
        let m = fs::read_to_string(out.join("manifests").join(format!("{stage}.json"))).unwrap();
        assert!(m.contains("sha256"), "{stage}");
    }
    assert!(out.join("report.txt").exists());

    let o = tvprofile(&[
        "run",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&out),
        "--stages",
        "bogus",
    ]);
    assert_eq!(o.status.code(), Some(1));
}
