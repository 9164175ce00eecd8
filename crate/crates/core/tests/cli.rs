use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pasg(args: &[&str], out: &Path, threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pasg"));
    cmd.args(args).arg("--out").arg(out).env_remove("PASG_THREADS");
    if let Some(t) = threads {
        cmd.env("PASG_THREADS", t);
    }
    cmd.output().expect("spawning pasg")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn bound_prints_unit_terms() {
    let dir = tempfile::tempdir().unwrap();
    let out = pasg(&["bound", "--n", "1"], dir.path(), None);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    for (term, want) in [("A1_sq", 1.0), ("A2_sq", 1.0), ("A3_sq", 8.0 / 3.0), ("A4_sq", 9.0), ("A5_sq", 3.0), ("A6_sq", 1.0)] {
        let got = summary[term].as_f64().unwrap();
        assert!((got - want).abs() <= 1e-12 * want, "{term}: {got}");
    }
    assert_eq!(summary["growth_exponent"].as_f64().unwrap(), 0.25);
    let csv = fs::read_to_string(dir.path().join("bound.csv")).unwrap();
    assert!(csv.starts_with("# pasg-bound schema=1\nn,p,alpha,c_gamma,term,value\n"));
    assert_eq!(csv.lines().count(), 2 + 9);
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(
        &cfg,
        "# small median run\nversion = 1\nobjective = median\ndim = 4\nmachines = 3\nn = 3000\nreps = 9\nseed = 11\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = pasg(&["run", "--config", cfg.to_str().unwrap(), "--reps", "4"], &out_dir, Some("2"));
    assert!(out.status.success(), "{}", stderr(&out));

    let csv = fs::read_to_string(out_dir.join("run.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.starts_with("run,median,4,3,uniform,3000,")));

    let manifest: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["master_seed"], 11);
    assert_eq!(manifest["schema_version"], 1);
    assert_eq!(manifest["threads"], 2);
    assert!(manifest["config"].as_str().unwrap().contains("reps = 4"));
    assert_eq!(manifest["csv"], "run.csv");
    assert_eq!(manifest["csv_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn same_seed_same_bytes_different_seed_different_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out_dir = dir.path().join(name);
        let out = pasg(
            &["compare", "--alloc", "pct:10,20,30,40", "--n", "4000", "--reps", "6", "--seed", seed],
            &out_dir,
            None,
        );
        assert!(out.status.success(), "{}", stderr(&out));
        fs::read(out_dir.join("compare.csv")).unwrap()
    };
    let a = run("a", "5");
    assert_eq!(a, run("b", "5"));
    assert_ne!(a, run("c", "6"));
}

#[test]
fn rejects_bad_input_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "n = 100\nstep_size = 3\n").unwrap();
    let cases: Vec<(Vec<&str>, Option<&str>, &str)> = vec![
        (vec!["run", "--config", cfg.to_str().unwrap()], None, "step_size"),
        (vec!["run", "--n", "1000", "--alpha", "0.5"], None, "alpha"),
        (vec!["run", "--n", "1000", "--alloc", "pct:50,40"], None, "alloc"),
        (vec!["sweep", "--n-grid", "1000,2000"], None, "n_grid"),
        (vec!["run", "--n", "1000"], Some("0"), "PASG_THREADS"),
        (vec!["run", "--n", "1000", "--objective", "huber"], None, "objective"),
    ];
    for (i, (args, threads, needle)) in cases.into_iter().enumerate() {
        let out_dir = dir.path().join(format!("out{i}"));
        let out = pasg(&args, &out_dir, threads);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(stderr(&out).contains(needle), "{args:?}: {}", stderr(&out));
        assert!(!out_dir.exists(), "{args:?} wrote output");
    }
}

#[test]
fn timing_flag_fills_wall_time() {
    let dir = tempfile::tempdir().unwrap();
    let out = pasg(&["run", "--n", "500", "--reps", "2", "--timing"], dir.path(), None);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("run.csv")).unwrap();
    for row in csv.lines().skip(2) {
        let wall = row.split(',').nth(10).unwrap();
        assert!(wall.parse::<f64>().unwrap() >= 0.0);
    }
}
