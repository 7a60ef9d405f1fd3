use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lab"))
        .args(args)
        .output()
        .unwrap()
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn base_text() -> String {
    fs::read_to_string(bundled("constant_1d.toml")).unwrap()
}

fn write_scenario(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("scenario.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn misspelled_key_is_named_and_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_scenario(dir.path(), &base_text().replace("n_cells", "n_cels"));
    let out_dir = dir.path().join("out");
    let o = lab(&[
        "run",
        p.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_cels"));
    assert!(!out_dir.exists());
}

#[test]
fn region_touching_the_boundary_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_scenario(
        dir.path(),
        &base_text().replace("[[-2.0, -1.0]]", "[[-8.0, -1.0]]"),
    );
    let out_dir = dir.path().join("out");
    let o = lab(&[
        "run",
        p.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn missing_file_is_invalid_input() {
    let o = lab(&["run", "/nonexistent/scenario.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn checks_are_listed_in_a_stable_order() {
    let a = lab(&["checks", "--json"]);
    let b = lab(&["checks", "--json"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    let names: Vec<&str> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "varadhan",
            "davies_gaffney",
            "propagation",
            "subordination",
            "localization",
            "trotter",
            "resistance",
            "exhaustion"
        ]
    );
}

#[test]
fn version_prints_something() {
    let o = lab(&["version"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(!o.stdout.is_empty());
}

fn without_wall_time(text: &str) -> String {
    let header = text.lines().next().unwrap_or_default().to_string();
    let cols: Vec<&str> = text.lines().nth(1).unwrap_or_default().split(',').collect();
    let skip = cols.iter().position(|c| *c == "wall_time");
    let mut out = vec![header];
    for l in text.lines().skip(1) {
        let row: Vec<&str> = l
            .split(',')
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(_, c)| c)
            .collect();
        out.push(row.join(","));
    }
    out.join("\n")
}

#[test]
fn bundled_scenario_passes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_scenario(dir.path(), &base_text());
    let mut runs = Vec::new();
    for k in 0..2 {
        let out_dir = dir.path().join(format!("out{k}"));
        let o = lab(&[
            "run",
            p.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        let report = fs::read_to_string(out_dir.join("report.txt")).unwrap();
        assert!(report.contains("fitted_d_squared="));
        assert!(report.lines().any(|l| l == "overall=PASS"));
        runs.push(out_dir);
    }
    for f in ["trace.csv", "distances.csv", "report.txt"] {
        let a = fs::read_to_string(runs[0].join(f)).unwrap();
        let b = fs::read_to_string(runs[1].join(f)).unwrap();
        if f == "distances.csv" {
            assert_eq!(without_wall_time(&a), without_wall_time(&b));
        } else {
            assert_eq!(a, b, "{f} differs between runs");
        }
    }
}

#[test]
fn bundled_scenarios_parse_and_validate() {
    let dir = bundled("");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            let sc = difflab::scenario::Scenario::from_path(&p).unwrap();
            sc.validate().unwrap();
            n += 1;
        }
    }
    assert!(n >= 1);
}
