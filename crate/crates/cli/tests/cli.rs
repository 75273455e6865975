use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qfc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qfc"))
        .args(args)
        .env_remove("QFC_OUT")
        .output()
        .expect("qfc runs")
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn defaults_print_a_valid_scenario() {
    let out = qfc(&["defaults"]);
    assert!(out.status.success());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenario.json");
    fs::write(&path, &out.stdout).unwrap();
    let v = qfc(&["--config", path.to_str().unwrap(), "validate"]);
    assert!(v.status.success(), "{}", String::from_utf8_lossy(&v.stderr));
}

#[test]
fn invalid_config_names_the_fields() {
    let out = qfc(&["defaults"]);
    let mut v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    v["channels"] = serde_json::json!([]);
    v["controller"]["setpoint_transmission"] = 1.5.into();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, v.to_string()).unwrap();
    let res = qfc(&["--config", path.to_str().unwrap(), "tomo"]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("channels"), "{err}");
    assert!(err.contains("controller.setpoint_transmission"), "{err}");
}

#[test]
fn malformed_json_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\"schema_version\": 1}").unwrap();
    let res = qfc(&["--config", path.to_str().unwrap(), "validate"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn tomo_writes_fidelity_table() {
    let dir = tempfile::tempdir().unwrap();
    let res = qfc(&["--out", dir.path().to_str().unwrap(), "tomo"]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let text = fs::read_to_string(dir.path().join("fig2d_fidelities.csv")).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 23);
}

#[test]
fn same_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let res = qfc(&[
            "--seed",
            "42",
            "--format",
            "both",
            "--out",
            d.path().to_str().unwrap(),
            "all",
        ]);
        assert!(res.status.success());
    }
    let (fa, fb) = (read_dir_sorted(a.path()), read_dir_sorted(b.path()));
    assert!(!fa.is_empty());
    assert_eq!(fa, fb);
    let csv = String::from_utf8(
        fa.iter()
            .find(|(n, _)| n == "fig4a_jsi.csv")
            .unwrap()
            .1
            .clone(),
    )
    .unwrap();
    assert!(csv.contains("# root_seed: 42"));
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let res = Command::new(env!("CARGO_BIN_EXE_qfc"))
        .arg("spectrum")
        .env("QFC_OUT", dir.path())
        .output()
        .unwrap();
    assert!(res.status.success());
    assert!(dir.path().join("figS1_resonances.csv").exists());
}
