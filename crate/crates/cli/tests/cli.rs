use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn scalebench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scalebench"))
        .args(args)
        .env_remove("SCALEBENCH_MAX_THREADS")
        .output()
        .expect("spawn scalebench")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn load(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn records(file: &Value) -> &Vec<Value> {
    file["records"].as_array().unwrap()
}

#[test]
fn list_shows_kernels_and_backends() {
    let out = scalebench(&["list"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in [
        "find",
        "for_each",
        "inclusive_scan",
        "reduce",
        "sort",
        "seq",
        "pool",
    ] {
        assert!(text.contains(name), "{name} missing from:\n{text}");
    }
}

#[test]
fn run_writes_one_record_per_plan_point() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let out = scalebench(&[
        "run",
        "--kernels",
        "reduce",
        "--backends",
        "seq,pool",
        "--max-threads",
        "4",
        "--oversubscribe",
        "--min-exp",
        "3",
        "--max-exp",
        "10",
        "--reps",
        "2",
        "--warmup",
        "0",
        "-q",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let file = load(&path);
    assert_eq!(file["schema_version"], 1);
    assert_eq!(file["metadata"]["max_threads_source"], "flag");
    // 1 kernel × (1 seq + 3 pool thread counts) × 8 sizes
    assert_eq!(records(&file).len(), 32);
    for r in records(&file) {
        assert_eq!(r["valid"], true);
        assert_eq!(r["durations_ns"].as_array().unwrap().len(), 2);
    }
}

#[test]
fn reps_default_to_ten() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let out = scalebench(&[
        "run",
        "--kernels",
        "find",
        "--backends",
        "seq",
        "--max-threads",
        "1",
        "--min-exp",
        "3",
        "--max-exp",
        "3",
        "-q",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let file = load(&path);
    let r = &records(&file)[0];
    assert_eq!(r["reps"], 10);
    assert_eq!(r["durations_ns"].as_array().unwrap().len(), 10);
}

#[test]
fn unknown_kernel_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = scalebench(&[
        "run",
        "--kernels",
        "nope",
        "--out",
        dir.path().join("r.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("nope"), "{err}");
    assert!(
        err.contains("find, for_each, inclusive_scan, reduce, sort"),
        "{err}"
    );
    assert!(!dir.path().join("r.json").exists());
}

#[test]
fn bad_flags_exit_two() {
    assert_eq!(
        scalebench(&["run", "--reps", "many"]).status.code(),
        Some(2)
    );
    assert_eq!(
        scalebench(&["run", "--backends", "gpu"]).status.code(),
        Some(2)
    );
    assert_eq!(
        scalebench(&[
            "run",
            "--max-threads",
            "1",
            "--min-exp",
            "9",
            "--max-exp",
            "4"
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(scalebench(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn max_threads_from_environment_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let out = Command::new(env!("CARGO_BIN_EXE_scalebench"))
        .args([
            "run",
            "--kernels",
            "reduce",
            "--backends",
            "pool",
            "--oversubscribe",
            "--min-exp",
            "3",
            "--max-exp",
            "3",
            "--reps",
            "1",
            "-q",
            "--out",
            path.to_str().unwrap(),
        ])
        .env("SCALEBENCH_MAX_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let file = load(&path);
    assert_eq!(file["metadata"]["max_threads"], 3);
    assert_eq!(
        file["metadata"]["max_threads_source"],
        "env:SCALEBENCH_MAX_THREADS"
    );
    let threads: Vec<u64> = records(&file)
        .iter()
        .map(|r| r["threads"].as_u64().unwrap())
        .collect();
    assert_eq!(threads, [1, 2, 3]);
}

#[test]
fn seq_threshold_marks_fallback_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let out = scalebench(&[
        "run",
        "--kernels",
        "reduce",
        "--backends",
        "pool",
        "--max-threads",
        "2",
        "--oversubscribe",
        "--min-exp",
        "3",
        "--max-exp",
        "12",
        "--seq-threshold",
        "1024",
        "--reps",
        "1",
        "-q",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for r in records(&load(&path)) {
        let n = r["size"].as_u64().unwrap();
        assert_eq!(r["fallback"], n < 1024, "{r}");
        assert_eq!(r["valid"], true);
    }
}

#[cfg(feature = "native")]
#[test]
fn unsupported_primitives_are_skipped_or_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let skipped = dir.path().join("skip.json");
    let fallback = dir.path().join("fallback.json");
    let base = [
        "run",
        "--kernels",
        "inclusive_scan",
        "--backends",
        "native",
        "--max-threads",
        "1",
        "--min-exp",
        "3",
        "--max-exp",
        "4",
        "--reps",
        "1",
        "-q",
    ];
    let out = scalebench(&[&base[..], &["--out", skipped.to_str().unwrap()]].concat());
    assert!(out.status.success(), "{}", stderr(&out));
    for r in records(&load(&skipped)) {
        assert_eq!(r["skipped"], true);
        assert_eq!(r["skip_reason"], "unsupported");
    }
    let out = scalebench(
        &[
            &base[..],
            &[
                "--fallback-unsupported",
                "--out",
                fallback.to_str().unwrap(),
            ],
        ]
        .concat(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    for r in records(&load(&fallback)) {
        assert_eq!(r["skipped"], false);
        assert_eq!(r["fallback"], true);
        assert_eq!(r["valid"], true);
    }
}

#[test]
fn isolated_run_matches_plan() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let out = scalebench(&[
        "run",
        "--kernels",
        "sort",
        "--backends",
        "seq,pool",
        "--max-threads",
        "2",
        "--oversubscribe",
        "--min-exp",
        "5",
        "--max-exp",
        "6",
        "--reps",
        "2",
        "--isolate",
        "-q",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let file = load(&path);
    assert_eq!(records(&file).len(), 6);
    assert!(records(&file).iter().all(|r| r["valid"] == true));
}

#[test]
fn verify_checks_without_timing() {
    let out = scalebench(&[
        "verify",
        "--kernels",
        "find,sort",
        "--backends",
        "seq,pool",
        "--max-threads",
        "2",
        "--oversubscribe",
        "--min-exp",
        "3",
        "--max-exp",
        "6",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("24 points checked, 0 failed"), "{text}");
}

#[test]
fn report_renders_and_names_missing_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full.json");
    let out = scalebench(&[
        "run",
        "--kernels",
        "reduce",
        "--backends",
        "seq,pool",
        "--max-threads",
        "2",
        "--oversubscribe",
        "--min-exp",
        "3",
        "--max-exp",
        "5",
        "--reps",
        "1",
        "-q",
        "--out",
        full.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let out = scalebench(&["report", full.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let seq_row = text.lines().find(|l| l.starts_with("| seq")).unwrap();
    assert!(seq_row.contains("1.00"), "{text}");

    let csv_dir = dir.path().join("csv");
    let out = scalebench(&[
        "report",
        full.to_str().unwrap(),
        "--format",
        "csv",
        "--artifacts",
        "speedup,plot",
        "--out",
        csv_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let plot = std::fs::read_to_string(csv_dir.join("plot.csv")).unwrap();
    assert!(plot.starts_with("kernel,backend,threads,size,allocator,element_type,median_ns"));
    assert_eq!(plot.lines().count(), 1 + 9);

    let pool_only = dir.path().join("pool.json");
    let out = scalebench(&[
        "run",
        "--kernels",
        "reduce",
        "--backends",
        "pool",
        "--max-threads",
        "1",
        "--min-exp",
        "3",
        "--max-exp",
        "3",
        "--reps",
        "1",
        "-q",
        "--out",
        pool_only.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let out = scalebench(&[
        "report",
        pool_only.to_str().unwrap(),
        "--artifacts",
        "speedup",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("reduce/seq/t1"), "{}", stderr(&out));
}

#[test]
fn report_merges_allocator_campaigns() {
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for alloc in ["first_touch", "default"] {
        let path = dir.path().join(format!("{alloc}.json"));
        let out = scalebench(&[
            "run",
            "--kernels",
            "reduce",
            "--backends",
            "seq",
            "--max-threads",
            "1",
            "--min-exp",
            "3",
            "--max-exp",
            "4",
            "--reps",
            "1",
            "--allocators",
            alloc,
            "-q",
            "--out",
            path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        paths.push(path);
    }
    let a = paths[0].to_str().unwrap();
    let b = paths[1].to_str().unwrap();
    let out = scalebench(&[
        "report",
        a,
        b,
        "--artifacts",
        "allocator",
        "--format",
        "csv",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3, "{text}");

    let out = scalebench(&["report", a, a]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("duplicate"), "{}", stderr(&out));
}
