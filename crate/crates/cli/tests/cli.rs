use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adbench_cli::results::{read_records, RESULTS_FILE};

fn adbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adbench")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = adbench(args);
    assert!(o.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small ADNI-like and FLENI-like cohorts under `dir`.
fn cohorts(dir: &Path) -> (PathBuf, PathBuf) {
    let (a, f) = (dir.join("adni"), dir.join("fleni"));
    ok(&["synth", "--cohort", "adni-like", "-n", "30", "--seed", "1", "--coarsen", "8", "--out", p(&a)]);
    ok(&["synth", "--cohort", "fleni-like", "-n", "8", "--seed", "2", "--coarsen", "8", "--out", p(&f)]);
    (a, f)
}

fn config(adni: &Path, fleni: &Path, extra: &str) -> String {
    format!(
        r#"{{"cohort": "{}", "external": [{{"name": "fleni", "path": "{}"}}],
            "model": "presnet", "labeling": "visit953", "classes": 2, "slices": 16,
            "normalization": "zscore_per_image", "selection": "first", "folds": 3, "seed": 4,
            "prep": {{"grid": [16, 16, 20]}}, "arch": {{"width": 0.25}},
            "train": {{"max_epochs": 2, "patience": 1}}{extra}}}"#,
        p(adni),
        p(fleni)
    )
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic_and_checks_args() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let s = ok(&["synth", "--cohort", "adni-like", "-n", "6", "--seed", "7", "--coarsen", "8", "--out", p(out)]);
        assert!(s.contains("6 subjects"), "{s}");
    }
    assert_eq!(tree(&a), tree(&b));
    let o = adbench(&["synth", "--cohort", "adni-like", "-n", "6"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--out"));
}

#[test]
fn fleni_like_geometry() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--cohort", "fleni-like", "-n", "2", "--seed", "1", "--out", p(dir.path())]);
    let sidecars: Vec<_> = tree(&dir.path().join("volumes")).into_iter().filter(|(n, _)| n.extension().is_some_and(|e| e == "json")).collect();
    assert_eq!(sidecars.len(), 2);
    for (_, bytes) in sidecars {
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(v["dims"], serde_json::json!([128, 128, 47]));
    }
}

#[test]
fn run_is_idempotent_and_writes_rows_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (adni, fleni) = cohorts(dir.path());
    let cfg = dir.path().join("exp.json");
    fs::write(&cfg, config(&adni, &fleni, "")).unwrap();
    let out = dir.path().join("out");
    let s = ok(&["run", p(&cfg), "--out", p(&out)]);
    assert!(s.contains("6 rows appended"), "{s}");
    let rows = read_records(&out.join(RESULTS_FILE)).unwrap();
    assert_eq!(rows.iter().filter(|r| r.split == "adni_test").count(), 3);
    assert_eq!(rows.iter().filter(|r| r.split == "external_fleni").count(), 3);
    assert!(rows.iter().all(|r| r.config_hash == rows[0].config_hash && r.config_hash.len() == 64));
    let ckpts: Vec<_> = tree(&out.join("checkpoints")).into_iter().filter(|(n, _)| n.extension().is_some_and(|e| e == "ckpt")).collect();
    assert_eq!(ckpts.len(), 3);

    let s = ok(&["run", p(&cfg), "--out", p(&out)]);
    assert!(s.contains("nothing to do"), "{s}");
    assert_eq!(read_records(&out.join(RESULTS_FILE)).unwrap().len(), 6);
    ok(&["run", p(&cfg), "--out", p(&out), "--force"]);
    assert_eq!(read_records(&out.join(RESULTS_FILE)).unwrap().len(), 6);

    let table = ok(&["report", p(&out)]);
    assert!(table.contains("| P-ResNet | visit953 | 2 | 16 | z-score per-image | first |"), "{table}");
}

#[test]
fn schema_errors_name_the_field_and_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    let text = config(Path::new("x"), Path::new("y"), "").replace("zscore_per_image", "zscore_diagonal");
    fs::write(&cfg, text).unwrap();
    let o = adbench(&["run", p(&cfg), "--out", p(dir.path())]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("`normalization`"), "{err}");
}

#[test]
fn ablation_product_and_skips() {
    let dir = tempfile::tempdir().unwrap();
    let (adni, fleni) = cohorts(dir.path());
    let base: serde_json::Value = serde_json::from_str(&config(&adni, &fleni, "")).unwrap();
    let grid = serde_json::json!({
        "base": base,
        "model": ["presnet"],
        "normalization": ["minmax", "zscore_per_image"],
        "labeling": ["last", "visit953"],
    });
    let gp = dir.path().join("grid.json");
    fs::write(&gp, grid.to_string()).unwrap();
    let out = dir.path().join("out");
    let table = ok(&["ablate", p(&gp), "--out", p(&out)]);
    assert_eq!(table.lines().count(), 2 + 4, "{table}");
    assert!(table.lines().skip(2).all(|l| l.split('|').filter(|c| c.trim().len() == 11 && c.contains(" (")).count() == 2), "{table}");
    assert_eq!(fs::read_to_string(out.join("summary.md")).unwrap(), table);

    let skip = serde_json::json!({"base": base, "model": ["inception"], "slices": [77]});
    fs::write(&gp, skip.to_string()).unwrap();
    let o = adbench(&["ablate", p(&gp), "--out", p(&out)]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("skipping model=inception slices=77"), "{err}");

    fs::write(&gp, serde_json::json!({"base": base}).to_string()).unwrap();
    assert!(!adbench(&["ablate", p(&gp), "--out", p(&out)]).status.success());
}

#[test]
fn occlusion_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (adni, fleni) = cohorts(dir.path());
    let cfg = dir.path().join("exp.json");
    fs::write(&cfg, config(&adni, &fleni, "")).unwrap();
    let out = dir.path().join("out");
    ok(&["run", p(&cfg), "--out", p(&out)]);
    let ckpt = tree(&out.join("checkpoints")).into_iter().find(|(n, _)| n.extension().is_some_and(|e| e == "ckpt")).unwrap().0;
    let ckpt = out.join("checkpoints").join(ckpt);
    let pre = dir.path().join("pre");
    ok(&["preprocess", "--cohort", p(&fleni), "--out", p(&pre), "--grid", "16,16,20"]);
    let vol = pre.join("volumes").join("fleni-like-0000-v1");

    let maps = dir.path().join("maps");
    let args = ["occlusion", "--checkpoint", p(&ckpt), "--volume", p(&vol), "--out", p(&maps), "--patch", "16", "--stride", "8"];
    let s = ok(&args);
    assert_eq!(fs::read_dir(&maps).unwrap().count(), 2, "{s}");
    let first = tree(&maps);
    ok(&args);
    assert_eq!(tree(&maps), first);

    let mut given = args.to_vec();
    given.extend(["--class", "given", "--label", "AD"]);
    assert!(ok(&given).contains("target AD"));

    let raw = dir.path().join("raw");
    ok(&["preprocess", "--cohort", p(&fleni), "--out", p(&raw), "--grid", "32,32,20"]);
    let mut wrong = args.to_vec();
    let other = raw.join("volumes").join("fleni-like-0000-v1");
    wrong[4] = p(&other);
    let o = adbench(&wrong);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not match"));
}

#[test]
fn describe_prints_total() {
    let s = ok(&["describe", "--model", "presnet"]);
    assert!(s.lines().last().unwrap().trim_end().ends_with("700691"), "{s}");
}
