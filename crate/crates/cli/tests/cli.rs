use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mfsc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mfsc"))
}

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    mfsc().arg("run").arg(config).arg("--out").arg(out).args(extra).output().unwrap()
}

fn verify(dir: &Path) -> Output {
    mfsc().arg("verify").arg(dir).output().unwrap()
}

#[test]
fn every_shipped_config_runs_and_verifies() {
    let tmp = tempfile::tempdir().unwrap();
    for name in [
        "harvesting.conf",
        "harvesting-seasonal.conf",
        "quadratic-cost.conf",
        "power-cost.conf",
        "custom-reflected.conf",
        "game.conf",
        "uncertainty.conf",
    ] {
        let dir = tmp.path().join(name);
        let out = run(&config(name), &dir, &[]);
        assert!(out.status.success(), "{name}: {}", text(&out));
        assert!(text(&out).contains("verdict = pass"), "{name}: {}", text(&out));
        let checked = verify(&dir);
        assert!(checked.status.success(), "{name}: {}", text(&checked));
        assert!(dir.join("manifest.json").exists());
        assert!(dir.join("config.txt").exists());
    }
}

#[test]
fn missing_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let body = fs::read_to_string(config("harvesting.conf")).unwrap();
    let cut: String = body.lines().filter(|l| !l.starts_with("cost.h0")).map(|l| format!("{l}\n")).collect();
    let path = tmp.path().join("broken.conf");
    fs::write(&path, cut).unwrap();
    let out = run(&path, &tmp.path().join("out"), &[]);
    assert!(!out.status.success());
    let msg = text(&out);
    assert!(msg.contains("cost.h0"), "{msg}");
    assert!(!tmp.path().join("out").join("manifest.json").exists());
}

#[test]
fn unknown_key_is_reported_with_its_line() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("typo.conf");
    let body = fs::read_to_string(config("harvesting.conf")).unwrap();
    fs::write(&path, format!("{body}model.sgima = 0.3\n")).unwrap();
    let out = run(&path, &tmp.path().join("out"), &[]);
    assert!(!out.status.success());
    let msg = text(&out);
    let line = body.lines().count() + 1;
    assert!(msg.contains("model.sgima") && msg.contains(&format!(":{line}")), "{msg}");
}

#[test]
fn second_player_serves_all_demand_in_the_game_demo() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("game");
    assert!(run(&config("game.conf"), &dir, &[]).status.success());
    let strategies = fs::read_to_string(dir.join("strategies.csv")).unwrap();
    let mut rows = strategies.lines();
    assert_eq!(rows.next(), Some("t,X,xi1,xi2,case"));
    let mut count = 0;
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[4], "ii-a", "{row}");
        assert_eq!(cols[2].parse::<f64>().unwrap(), 0.0, "{row}");
        count += 1;
    }
    assert_eq!(count, 201);
}

#[test]
fn corrupted_control_fails_verification() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("h");
    assert!(run(&config("harvesting.conf"), &dir, &["--particles", "200"]).status.success());
    let path = dir.join("xi_paths.csv");
    let body = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = body.lines().map(str::to_string).collect();
    // make particle 0's control drop below its value at t = 0
    let last = lines.len() - 1;
    let mut cols: Vec<String> = lines[last].split(',').map(str::to_string).collect();
    cols[1] = "-1e0".into();
    lines[last] = cols.join(",");
    fs::write(&path, lines.join("\n") + "\n").unwrap();

    let out = verify(&dir);
    assert!(!out.status.success());
    let report = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(report.contains("xi_monotone = fail"), "{report}");
    assert!(report.contains("files_unchanged = fail"), "{report}");
    assert!(report.contains("verdict = fail"), "{report}");
}

#[test]
fn run_without_manifest_is_incomplete() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("q");
    assert!(run(&config("quadratic-cost.conf"), &dir, &["--particles", "100"]).status.success());
    fs::remove_file(dir.join("manifest.json")).unwrap();
    let out = verify(&dir);
    assert!(!out.status.success());
    assert!(text(&out).contains("incomplete run"), "{}", text(&out));
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs: Vec<PathBuf> = ["one", "eight", "again"].iter().map(|s| tmp.path().join(s)).collect();
    for (dir, threads) in dirs.iter().zip(["1", "8", "1"]) {
        let out = mfsc()
            .args(["--threads", threads, "run"])
            .arg(config("custom-reflected.conf"))
            .arg("--out")
            .arg(dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", text(&out));
    }
    for name in ["x_paths.csv", "xi_paths.csv", "y.csv", "barrier.csv", "trace.csv", "summary.txt"] {
        let a = fs::read(dirs[0].join(name)).unwrap();
        for d in &dirs[1..] {
            assert_eq!(a, fs::read(d.join(name)).unwrap(), "{name}");
        }
    }
}

#[test]
fn overrides_reach_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("o");
    let out = run(&config("power-cost.conf"), &dir, &["--seed", "99", "--particles", "50", "--steps", "40"]);
    assert!(out.status.success(), "{}", text(&out));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 99);
    assert_eq!(manifest["particles"], 50);
    assert_eq!(manifest["steps"], 40);
    let canonical = fs::read_to_string(dir.join("config.txt")).unwrap();
    assert!(canonical.contains("seed = 99"), "{canonical}");
    assert!(verify(&dir).status.success());
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mfsc()
        .arg("run")
        .arg(config("custom-reflected.conf"))
        .args(["--particles", "20"])
        .env("MFSC_OUTPUT_ROOT", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out));
    assert!(tmp.path().join("custom-reflected").join("manifest.json").exists());
}

#[test]
fn demo_prints_a_runnable_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mfsc().args(["demo", "uncertainty"]).output().unwrap();
    assert!(out.status.success());
    assert_eq!(out.stdout, fs::read(config("uncertainty.conf")).unwrap());
    let path = tmp.path().join("u.conf");
    fs::write(&path, &out.stdout).unwrap();
    let run = run(&path, &tmp.path().join("u"), &["--particles", "200"]);
    assert!(run.status.success(), "{}", text(&run));

    let bad = mfsc().args(["demo", "nope"]).output().unwrap();
    assert!(!bad.status.success());
}

#[test]
fn seasonal_table_is_copied_into_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("s");
    assert!(run(&config("harvesting-seasonal.conf"), &dir, &["--particles", "100"]).status.success());
    let canonical = fs::read_to_string(dir.join("config.txt")).unwrap();
    assert!(canonical.contains("model.b.table = \"tables/model.b.csv\""), "{canonical}");
    let table = fs::read_to_string(dir.join("tables").join("model.b.csv")).unwrap();
    assert!(table.starts_with("t,value"), "{table}");
    // the copied table must keep verification self-contained
    let moved = tmp.path().join("moved");
    fs::rename(&dir, &moved).unwrap();
    let out = verify(&moved);
    assert!(out.status.success(), "{}", text(&out));
}
