use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn wcmdp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wcmdp")).args(args).output().expect("binary runs")
}

fn workdir(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn path(dir: &Path, file: &str) -> String {
    dir.join(file).to_string_lossy().into_owned()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn four_rooms(dir: &Path, room: usize) -> (String, String) {
    let (m, p) = (path(dir, &format!("mdp{room}.json")), path(dir, "partition.json"));
    let out = wcmdp(&["problems", "generate", "--reward-room", &room.to_string(), "--mdp-out", &m, "--partition-out", &p]);
    assert!(out.status.success());
    (m, p)
}

#[test]
fn solve_two_state_chain() {
    let dir = workdir("chain");
    let mdp = path(&dir, "chain.json");
    std::fs::write(
        &mdp,
        r#"{"n_states": 2, "n_actions": 1, "discount": 0.9,
            "transition": [[[0.0, 1.0]], [[0.0, 1.0]]],
            "reward": [[1.0], [0.0]]}"#,
    )
    .unwrap();
    for method in ["vi", "pi"] {
        let v = json(&wcmdp(&["solve", "--mdp", &mdp, "--method", method]));
        let values: Vec<f64> = serde_json::from_value(v["values"].clone()).unwrap();
        assert!((values[0] - 1.0).abs() < 1e-9 && values[1].abs() < 1e-9, "{values:?}");
    }
    let csv = wcmdp(&["solve", "--mdp", &mdp, "--format", "csv"]);
    assert!(String::from_utf8_lossy(&csv.stdout).starts_with("state,value,action\n"));
}

#[test]
fn bench_room1_report() {
    let report = json(&wcmdp(&["bench", "room1", "--eps", "0.01"]));
    let size = report["vss_cache_size"].as_u64().unwrap();
    assert!((10..=60).contains(&size));
    assert_eq!(report["certified"], true);
    assert_eq!(report["grid_count"], 4_000_000);
    let fine = json(&wcmdp(&["bench", "room1", "--eps", "0.001"]));
    assert_eq!(fine["grid_count"], 400_000_000);
}

#[test]
fn outputs_are_byte_identical() {
    let a = wcmdp(&["bench", "room1", "--seed", "3"]);
    let b = wcmdp(&["bench", "room1", "--seed", "3", "--workers", "1"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn build_certify_and_solve_hierarchically() {
    let dir = workdir("pipeline");
    let (mdp, partition) = four_rooms(&dir, 1);
    let decomposition = json(&wcmdp(&["decompose", "--mdp", &mdp, "--partition", &partition]));
    assert_eq!(decomposition["boundary_states"].as_array().unwrap().len(), 8);

    let caches = path(&dir, "caches.json");
    let args = ["cache-build", "--mdp", &mdp, "--partition", &partition, "--eps", "0.01", "--vmin", "0", "--vmax", "20"];
    let built = wcmdp(&[&args[..], &["--out", &caches]].concat());
    assert!(built.status.success(), "{}", String::from_utf8_lossy(&built.stderr));
    let again = wcmdp(&[&args[..], &["--out", &path(&dir, "again.json")]].concat());
    assert!(again.status.success());
    assert_eq!(std::fs::read(&caches).unwrap(), std::fs::read(path(&dir, "again.json")).unwrap());

    let checks = json(&wcmdp(&["certify", "--mdp", &mdp, "--caches", &caches]));
    for c in checks.as_array().unwrap() {
        assert_eq!(c["certified"], true);
        assert_eq!(c["recomputed_worst"], c["stored_worst"]);
    }

    let hier = json(&wcmdp(&["solve-hier", "--mdp", &mdp, "--partition", &partition, "--caches", &caches, "--eps", "0.01"]));
    let att = &hier["attestation"];
    assert!(att["max_deviation"].as_f64().unwrap() <= 0.2 + 1e-6);
    assert_eq!(att["guarantee"], "all_states");

    let table = wcmdp(&["solve-hier", "--mdp", &mdp, "--partition", &partition, "--caches", &caches, "--eps", "0.01", "--format", "csv"]);
    let text = String::from_utf8(table.stdout).unwrap();
    assert!(text.starts_with("state,region,flat,hierarchical,difference\n"));
    assert_eq!(text.lines().count(), 101);
}

#[test]
fn transfer_reuses_unchanged_rooms() {
    let dir = workdir("transfer");
    let (old, partition) = four_rooms(&dir, 1);
    let (new, _) = four_rooms(&dir, 3);
    let caches = path(&dir, "caches.json");
    let built = wcmdp(&[
        "cache-build", "--mdp", &old, "--partition", &partition, "--eps", "0.01", "--vmin", "0", "--vmax", "20", "--out", &caches,
    ]);
    assert!(built.status.success());
    let report = json(&wcmdp(&["transfer", "--old", &old, "--new", &new, "--partition", &partition, "--caches", &caches, "--eps", "0.01"]));
    let regions = report["regions"].as_array().unwrap();
    for r in [0, 2] {
        assert_eq!(regions[r]["reused"], true);
        assert_eq!(regions[r]["new_policies"], 0);
    }
    assert_eq!(report["outcome"]["converged"], true);
}

#[test]
fn exit_codes() {
    let dir = workdir("codes");
    let (mdp, partition) = four_rooms(&dir, 1);
    assert_eq!(wcmdp(&["solve", "--mdp", &path(&dir, "missing.json")]).status.code(), Some(3));
    assert_eq!(wcmdp(&["solve", "--nonsense"]).status.code(), Some(2));
    let grid = wcmdp(&[
        "cache-build", "--mdp", &mdp, "--partition", &partition, "--eps", "0.01", "--vmin", "0", "--vmax", "20", "--method", "grid",
    ]);
    assert_eq!(grid.status.code(), Some(2));
    let starved = wcmdp(&["prioritize", "--mdp", &mdp, "--partition", &partition, "--eps", "0.01", "--vmin", "0", "--vmax", "20", "--budget", "1"]);
    assert_eq!(starved.status.code(), Some(5));
    let bad_eps = wcmdp(&["bench", "room1", "--eps", "0"]);
    assert_eq!(bad_eps.status.code(), Some(2));
}

#[test]
fn prioritize_log_as_csv() {
    let dir = workdir("prioritize");
    let (mdp, partition) = four_rooms(&dir, 1);
    let out = wcmdp(&["prioritize", "--mdp", &mdp, "--partition", &partition, "--eps", "0.01", "--vmin", "0", "--vmax", "20", "--format", "csv"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("iteration,region,gap,certified,chosen\n"));
}

#[test]
fn render_four_rooms() {
    let out = wcmdp(&["problems", "render"]);
    let map = String::from_utf8(out.stdout).unwrap();
    assert_eq!(map.matches('D').count(), 4);
    assert_eq!(map.matches('*').count(), 1);
}
