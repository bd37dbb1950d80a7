use std::path::Path;
use std::process::{Command, Output};

fn convhom(args: &[&str], workers: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_convhom"));
    cmd.args(args);
    match workers {
        Some(w) => cmd.env("CONVHOM_WORKERS", w),
        None => cmd.env_remove("CONVHOM_WORKERS"),
    };
    cmd.output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn energy_config(out: &Path) -> String {
    format!(
        r#"experiment = "energy"
output = "{}"
[density]
name = "plaplace"
p = 3
[grid]
lengths = [1.0]
h = 0.01
[scales]
eps = [0.1, 0.05, 0.02]
"#,
        out.display()
    )
}

#[test]
fn validate_reports_every_problem_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.toml",
        r#"experiment = "energy"
[density]
name = "nope"
[kernel]
name = "boxcar"
[grid]
lengths = [1.0]
h = 0.03
[scales]
eps = [0.05]
"#,
    );
    let out = convhom(&["validate", &cfg], None);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("density.name"), "{err}");
    assert!(err.contains("kernel.name"), "{err}");
    assert!(err.contains("incommensurate grid"), "{err}");
    assert!(err.contains("plaplace"), "catalog listing missing: {err}");

    let good = write_config(dir.path(), "good.toml", &energy_config(&dir.path().join("o")));
    let out = convhom(&["validate", &good], None);
    assert_eq!(out.status.code(), Some(0));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn parse_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "experiment = \"energy\"\n[grid\nh = 0.1\n");
    let out = convhom(&["validate", &cfg], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn subcommand_must_match_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "e.toml", &energy_config(&dir.path().join("o")));
    let out = convhom(&["sweep", &cfg], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("experiment"));
}

#[test]
fn energy_writes_one_row_per_eps() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("o");
    let cfg = write_config(dir.path(), "e.toml", &energy_config(&o));
    let out = convhom(&["energy", &cfg], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = read_csv(&o.join("energy.csv"));
    assert_eq!(header, ["eps", "value", "local_limit", "gap"]);
    assert_eq!(rows.len(), 3);
    for (row, eps) in rows.iter().zip([0.1, 0.05, 0.02]) {
        let v: Vec<f64> = row.iter().map(|s| s.parse().unwrap()).collect();
        assert_eq!(v[0], eps);
        assert!((v[3] - (v[1] - v[2])).abs() < 1e-12);
    }
}

#[test]
fn reruns_are_byte_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let body = |out: &Path| {
        format!(
            r#"experiment = "pointcloud"
output = "{}"
seeds = [3, 4]
[grid]
lengths = [1.0, 1.0]
h = 0.05
[probes]
m = [[1.0, 0.5]]
[pointcloud]
n_list = [150, 300]
"#,
            out.display()
        )
    };
    let mut contents = Vec::new();
    for (k, w) in ["1", "3", "1"].iter().enumerate() {
        let o = dir.path().join(format!("o{k}"));
        let cfg = write_config(dir.path(), &format!("c{k}.toml"), &body(&o));
        let out = convhom(&["pointcloud", &cfg], Some(w));
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let m = manifest(&o);
        assert_eq!(m["workers"].as_u64().unwrap(), w.parse::<u64>().unwrap());
        contents.push((
            std::fs::read(o.join("pointcloud.csv")).unwrap(),
            std::fs::read(o.join("pointcloud_summary.csv")).unwrap(),
        ));
    }
    assert!(contents.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(read_csv(&dir.path().join("o0/pointcloud.csv")).1.len(), 4);
}

#[test]
fn seed_flag_replaces_the_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("o");
    let cfg = write_config(
        dir.path(),
        "f.toml",
        &format!(
            r#"experiment = "flow"
output = "{}"
seeds = [1, 2, 3]
[grid]
lengths = [1.0]
h = 0.01
boundary = "periodic"
[scales]
eps = [0.1]
tau = 1e-4
t_end = 1e-3
[probes]
initial = "random"
"#,
            o.display()
        ),
    );
    let run = |seed: &str| {
        let out = convhom(&["flow", &cfg, "--seed", seed], Some("1"));
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(manifest(&o)["seeds"], serde_json::json!([seed.parse::<u64>().unwrap()]));
        std::fs::read(o.join("flow_states.csv")).unwrap()
    };
    let a = run("9");
    let b = run("10");
    assert_ne!(a, b);
    assert_eq!(a, run("9"));
}

#[test]
fn sweep_has_rows_per_probe_method_and_scale() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("o");
    let cfg = write_config(
        dir.path(),
        "s.toml",
        &format!(
            r#"experiment = "sweep"
output = "{}"
[density]
name = "plaplace"
p = 2
[scales]
r_list = [4, 8]
n = 16
resolution = 8
[probes]
m = [[1.0], [-2.0]]
[homogenize]
methods = ["closed_form", "cell", "asymptotic"]
"#,
            o.display()
        ),
    );
    let out = convhom(&["sweep", &cfg], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = read_csv(&o.join("sweep.csv"));
    assert_eq!(header, ["m", "method", "index", "seed", "value", "iterations", "converged"]);
    for m in ["1", "-2"] {
        for method in ["closed_form", "cell", "asymptotic"] {
            let n = rows.iter().filter(|r| r[0] == m && r[1] == method).count();
            assert!(n >= 1, "no rows for {m} {method}");
        }
        let scales: Vec<&str> = rows
            .iter()
            .filter(|r| r[0] == m && r[1] == "asymptotic")
            .map(|r| r[2].as_str())
            .collect();
        assert_eq!(scales, ["4", "8"]);
    }
    // quadratic density: value at M = -2 is four times the value at M = 1
    let closed: Vec<f64> = rows
        .iter()
        .filter(|r| r[1] == "closed_form")
        .map(|r| r[4].parse().unwrap())
        .collect();
    assert!((closed[1] - 4.0 * closed[0]).abs() < 1e-12);
}

#[test]
fn manifest_lists_every_artifact_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("o");
    let cfg = write_config(
        dir.path(),
        "h.toml",
        &format!(
            r#"experiment = "homogenize"
output = "{}"
seeds = [5, 6, 7]
[density]
name = "random_checkerboard"
[scales]
r_list = [4]
resolution = 8
[homogenize]
method = "stochastic"
"#,
            o.display()
        ),
    );
    let out = convhom(&["homogenize", &cfg], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(&o);
    assert_eq!(m["seeds"], serde_json::json!([5, 6, 7]));
    assert_eq!(m["experiment"], "homogenize");
    assert_eq!(m["config"]["density"]["name"], "random_checkerboard");
    assert!(m["version"].as_str().is_some());
    assert!(m["wall_time_seconds"].as_f64().unwrap() >= 0.0);
    let mut listed: Vec<String> = m["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["path"].as_str().unwrap().to_string())
        .collect();
    listed.sort();
    let mut on_disk: Vec<String> = std::fs::read_dir(&o)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    on_disk.sort();
    assert_eq!(listed, on_disk);
    for a in m["artifacts"].as_array().unwrap() {
        let rows = read_csv(&o.join(a["path"].as_str().unwrap())).1.len();
        assert_eq!(a["rows"].as_u64().unwrap() as usize, rows);
    }
    let seeds_in_table: std::collections::BTreeSet<String> =
        read_csv(&o.join("homogenize.csv")).1.iter().map(|r| r[3].clone()).collect();
    assert_eq!(seeds_in_table.into_iter().collect::<Vec<_>>(), ["5", "6", "7"]);
}

#[test]
fn failed_tasks_give_nonzero_exit_and_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("o");
    let cfg = write_config(
        dir.path(),
        "f.toml",
        &format!(
            r#"experiment = "flow"
output = "{}"
[grid]
lengths = [1.0]
h = 0.01
boundary = "periodic"
[scales]
eps = [0.1]
tau = 0.01
t_end = 0.05
[probes]
initial = "sine"
[flow]
integrator = "explicit"
"#,
            o.display()
        ),
    );
    let out = convhom(&["flow", &cfg], None);
    assert_eq!(out.status.code(), Some(1));
    let m = manifest(&o);
    assert_eq!(m["failed_tasks"], 1);
    let failed: Vec<_> = m["tasks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|t| t["status"] == "failed")
        .collect();
    assert!(failed[0]["error"].as_str().unwrap().contains("stability"));

    // the same flow with a stable step succeeds
    let out = convhom(&["flow", &cfg, "--integrator", "mm"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(manifest(&o)["failed_tasks"], 0);
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let out = convhom(&["validate", path.to_str().unwrap()], None);
            assert!(out.status.success(), "{}: {}", path.display(), String::from_utf8_lossy(&out.stderr));
            n += 1;
        }
    }
    assert!(n >= 6);
}
