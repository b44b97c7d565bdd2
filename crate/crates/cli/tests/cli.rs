use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fcmfrac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcmfrac"))
        .args(args)
        .env("FCMFRAC_THREADS", "1")
        .output()
        .expect("fcmfrac runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// 2 x 2 x 4 mm bar on rollers, compressed along z.
const BAR_CONFIG: &str = r#"
[image]
sidecar = "bar.json"

[discretization]
h = 1.0
p = 2

[solver]
l0 = 1.0

[solver.schedule]
u_large = 0.001
u_med = 0.001
u_small = 0.001
target_displacement = 0.003

[loading]
reaction_boundary = "top"
component = 2
sign = -1

[postproc]
probe = { center = [1.0, 1.0, 2.0], radius = 0.5 }

[output]
dir = "out"

[[boundary]]
name = "bottom"
region = { type = "box_face", face = "z_min" }
constraint = { kind = "component", component = 2, value = 0.0 }

[[boundary]]
name = "x_sym"
region = { type = "box_face", face = "x_min" }
constraint = { kind = "component", component = 0, value = 0.0 }

[[boundary]]
name = "y_sym"
region = { type = "box_face", face = "y_min" }
constraint = { kind = "component", component = 1, value = 0.0 }

[[boundary]]
name = "top"
region = { type = "box_face", face = "z_max" }
constraint = { kind = "loaded", component = 2, scale = 1.0 }
"#;

fn setup_bar(dir: &Path, extra: &str) -> String {
    let o = fcmfrac(&[
        "phantom",
        "--kind",
        "uniform-bar",
        "--size",
        "4,4,8",
        "--spacing",
        "0.5",
        "-o",
        dir.to_str().unwrap(),
        "--stem",
        "bar",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = dir.join("bar.toml");
    fs::write(&cfg, format!("{BAR_CONFIG}{extra}")).unwrap();
    cfg.to_str().unwrap().to_string()
}

#[test]
fn missing_image_section_is_reported_by_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    let text = BAR_CONFIG.replace("[image]\nsidecar = \"bar.json\"\n", "");
    fs::write(&cfg, text).unwrap();
    let o = fcmfrac(&["run", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("image"), "{}", stderr(&o));
}

#[test]
fn missing_sidecar_file_is_reported_by_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, BAR_CONFIG).unwrap();
    let o = fcmfrac(&["run", "-c", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("image.sidecar"), "{}", stderr(&o));
}

#[test]
fn unknown_phantom_kind_lists_the_choices() {
    let dir = tempfile::tempdir().unwrap();
    let o = fcmfrac(&["phantom", "--kind", "cube", "-o", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("notched-plate"), "{}", stderr(&o));
}

#[test]
fn run_postproc_and_probe_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup_bar(dir.path(), "");
    let o = fcmfrac(&["--log-level", "warn", "run", "-c", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    for f in [
        "force_strain.csv",
        "summary.json",
        "provenance.json",
        "checkpoint.bin",
        "fields_final.vtu",
        "crack_isovolume.vtu",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 3);
    assert_eq!(summary["termination"], "target_reached");

    let csv = fs::read(out.join("force_strain.csv")).unwrap();
    let vtu = fs::read(out.join("fields_final.vtu")).unwrap();
    fs::remove_file(out.join("fields_final.vtu")).unwrap();
    let o = fcmfrac(&["postproc", "-c", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(out.join("force_strain.csv")).unwrap(), csv);
    assert_eq!(fs::read(out.join("fields_final.vtu")).unwrap(), vtu);

    // uniform compression by 0.003 mm over 4 mm
    let o = fcmfrac(&["probe", "-c", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let eps3: f64 = text.trim().strip_prefix("eps3_ustrain = ").unwrap().parse().unwrap();
    assert!((eps3 + 750.0).abs() < 0.01 * 750.0, "{eps3}");

    // --center overrides the configured probe
    let o = fcmfrac(&["probe", "-c", &cfg, "--center", "0.5,0.5,3.5", "--radius", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("eps3_ustrain = -7"), "{}", stdout(&o));
}

#[test]
fn postproc_without_checkpoint_fails_with_hint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup_bar(dir.path(), "");
    let o = fcmfrac(&["postproc", "-c", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fcmfrac run"), "{}", stderr(&o));
}

#[test]
fn resume_continues_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup_bar(dir.path(), "");
    let full = fcmfrac(&["--log-level", "warn", "run", "-c", &cfg, "-o", dir.path().join("full").to_str().unwrap()]);
    assert!(full.status.success(), "{}", stderr(&full));

    let short = fs::read_to_string(&cfg).unwrap().replace("target_displacement = 0.003", "target_displacement = 0.002");
    let short_cfg = dir.path().join("short.toml");
    fs::write(&short_cfg, short).unwrap();
    let part = dir.path().join("part");
    let o = fcmfrac(&["--log-level", "warn", "run", "-c", short_cfg.to_str().unwrap(), "-o", part.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = fcmfrac(&["--log-level", "error", "run", "-c", &cfg, "-o", part.to_str().unwrap(), "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(part.join("force_strain.csv")).unwrap(),
        fs::read(dir.path().join("full/force_strain.csv")).unwrap()
    );
}

#[test]
fn calibrate_with_one_candidate_writes_the_ranking() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("ref.csv"), "strain_ustrain,force_n\n0,0\n-750,-30\n").unwrap();
    let sweep = "\n[sweep]\nparameter = \"gc0\"\nvalues = [7.0]\nreference = \"ref.csv\"\n";
    let cfg = setup_bar(dir.path(), sweep);
    let o = fcmfrac(&["--log-level", "warn", "calibrate", "-c", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("ranked by"), "{}", stdout(&o));
    let out = dir.path().join("out");
    let csv = fs::read_to_string(out.join("sweep_results.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("rank,value,failure_load_n"));
    assert!(lines.next().unwrap().starts_with("1,7,"));
    assert!(out.join("candidate_00_gc0_7/force_strain.csv").is_file());
}

#[test]
fn version_prints_package_version() {
    let o = fcmfrac(&["version"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), format!("fcmfrac {}", env!("CARGO_PKG_VERSION")));
}
