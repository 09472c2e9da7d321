use std::path::Path;
use std::process::{Command, Output};

fn optresp(args: &[&str], cache: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_optresp"))
        .args(args)
        .env("OPTRESP_CACHE_DIR", cache)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &["--set", "n=120", "--set", "m=60", "--set", "basis_i=3", "--set", "basis_j=3", "--set", "samples=20"];

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    let mut v = head.to_vec();
    v.extend_from_slice(SMALL);
    v
}

#[test]
fn version_reports_cache_format() {
    let dir = tempfile::tempdir().unwrap();
    let o = optresp(&["--version"], dir.path());
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("kernel cache format 1"));
}

#[test]
fn reproduce_figures_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = optresp(&["reproduce-figures", "--out", out.to_str().unwrap(), "--threads", "1"], &dir.path().join("cache"));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["fig1a_kernel.csv", "fig1b_f0.csv", "fig3b_optimal_pert.csv", "fig3c_perturbed_kernel.csv", "fig3d_densities.csv", "report.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["basis_i"], 35);
    assert_eq!(report["runtime"]["kernel_source"], "built");
    let head = std::fs::read_to_string(out.join("fig3d_densities.csv")).unwrap();
    assert!(head.starts_with("x,f0,delta_0.5\n"));
}

#[test]
fn build_kernel_twice_hits_cache_and_survives_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let out = dir.path().join("out");
    let args = with_small(&["build-kernel", "--out", out.to_str().unwrap()]);
    let first = optresp(&args, &cache);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    assert!(!stderr(&first).contains("cache hit"));
    let second = optresp(&args, &cache);
    assert_eq!(second.status.code(), Some(0));
    assert!(stderr(&second).contains("cache hit"), "{}", stderr(&second));

    let file = std::fs::read_dir(&cache).unwrap().map(|e| e.unwrap().path()).find(|p| p.extension().is_some_and(|e| e == "ortk")).unwrap();
    let mut bytes = std::fs::read(&file).unwrap();
    let k = bytes.len() / 2;
    bytes[k] ^= 0x40;
    std::fs::write(&file, bytes).unwrap();
    let third = optresp(&args, &cache);
    assert_eq!(third.status.code(), Some(0));
    let err = stderr(&third);
    assert!(err.contains("WARN") && err.contains("checksum mismatch"), "{err}");
    let fourth = optresp(&args, &cache);
    assert!(stderr(&fourth).contains("cache hit"));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, "epsilon = 0.3\nn = 120\nm = 60\nbasis_i = 3\nbasis_j = 3\n").unwrap();
    let out = dir.path().join("out");
    let o = optresp(
        &["invariant", "--config", cfg.to_str().unwrap(), "--set", "epsilon=0.35", "--out", out.to_str().unwrap()],
        &dir.path().join("cache"),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["epsilon"], 0.35);
    assert_eq!(report["overrides"][0], "epsilon=0.35");
    // The echoed TOML reproduces the run.
    let echoed = dir.path().join("echo.toml");
    std::fs::write(&echoed, report["config_toml"].as_str().unwrap()).unwrap();
    let out2 = dir.path().join("out2");
    let o2 = optresp(&["invariant", "--config", echoed.to_str().unwrap(), "--out", out2.to_str().unwrap()], &dir.path().join("cache"));
    assert_eq!(o2.status.code(), Some(0));
    assert_eq!(std::fs::read(out.join("fig1b_f0.csv")).unwrap(), std::fs::read(out2.join("fig1b_f0.csv")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let odd = optresp(&["invariant", "--set", "n=3", "--out", out], &cache);
    assert_eq!(odd.status.code(), Some(2));
    assert!(stderr(&odd).contains("n must be even"));
    let unknown = optresp(&["invariant", "--set", "bogus=1", "--out", out], &cache);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(stderr(&unknown).contains("bogus"));

    let strict = with_small(&["build-kernel", "--set", "tol_row_mass=1e-12", "--out", out]);
    assert_eq!(optresp(&strict, &cache).status.code(), Some(1));

    let stalled = with_small(&["invariant", "--set", "max_iterations=1", "--out", out]);
    let o = optresp(&stalled, &cache);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("invariant density"));
}

#[test]
fn optimize_writes_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = optresp(&with_small(&["optimize", "--out", out.to_str().unwrap()]), &dir.path().join("cache"));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("coefficients.csv")).unwrap();
    assert!(table.starts_with("i,j,kind,G_r\n1,0,cc,"));
    assert_eq!(table.lines().count(), 1 + 3 * (2 + 4 * 3));
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("optimal_pert.json")).unwrap()).unwrap();
    assert_eq!(meta["basis_i"], 3);
    assert!(meta["coefficient_norm"].as_f64().unwrap() > 0.0);
    assert!(!out.join("fig3d_densities.csv").exists());
}

#[test]
fn ou_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = optresp(&["ou-check", "--out", out.to_str().unwrap()], &dir.path().join("cache"));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("ou_oracle.json").is_file());
}
