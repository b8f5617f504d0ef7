use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

const CUBIC: &str = r#"
[nonlinearity]
p = 3
terms = [{ k = 3, poly = [1.0] }]

[cutoffs]
l0 = 4
p_max = 2

[cantor]
k_max = 100
samples = 20000
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rwave"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run(args: &[&str], config: &Path, out: &Path) -> i32 {
    let st = bin().args(args).arg("--config").arg(config).arg("--out").arg(out).env_remove("RWAVE_SEED").output().unwrap();
    st.status.code().expect("exit code")
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "metadata.json" {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let idx = rdr.headers().unwrap().iter().position(|h| h == name).unwrap();
    rdr.records().map(|r| r.unwrap()[idx].to_string()).collect()
}

#[test]
fn malformed_config_exits_with_parse_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[nonlinearity\np = 3\n");
    assert_eq!(run(&["q0"], &cfg, &dir.path().join("o")), 1);
    let cfg = write_config(dir.path(), "unknown.toml", &format!("{CUBIC}\n[extra]\nx = 1\n"));
    assert_eq!(run(&["q0"], &cfg, &dir.path().join("o")), 1);
}

#[test]
fn missing_config_file_exits_with_parse_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["q0"], &dir.path().join("absent.toml"), &dir.path().join("o")), 1);
}

#[test]
fn zero_leading_coefficient_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "zero.toml", "[nonlinearity]\np = 3\nterms = [{ k = 3, poly = [0.0] }]\n");
    assert_eq!(run(&["q0"], &cfg, &dir.path().join("o")), 2);
}

#[test]
fn amplitude_above_delta0_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", CUBIC);
    assert_eq!(run(&["solve", "--delta", "0.2"], &cfg, &dir.path().join("o")), 2);
}

#[test]
fn resonant_amplitude_is_rejected() {
    // ω = 16/15 puts (k, j) = (15, 16) exactly on resonance at L_p = 16.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "r.toml", &format!("{CUBIC}\n[schedule]\ndelta0 = 0.3\n"));
    let delta = ((256.0f64 / 225.0 - 1.0) / 2.0).sqrt();
    let out = dir.path().join("o");
    assert_eq!(run(&["solve", "--delta", &delta.to_string()], &cfg, &out), 4);
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("solve/report.json")).unwrap()).unwrap();
    assert_eq!(rep["rejected_stage"], 2);
}

#[test]
fn sweep_is_deterministic_and_monotone_in_omega() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", CUBIC);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&["sweep", "--seed", "3"], &cfg, &a), 0);
    assert_eq!(run(&["sweep", "--seed", "3", "--workers", "2"], &cfg, &b), 0);
    assert_eq!(files(&a), files(&b));
    let branch = a.join("sweep/branch.csv");
    assert_eq!(csv_rows(&branch).len(), 12);
    let omega: Vec<f64> = column(&branch, "omega").iter().map(|s| s.parse().unwrap()).collect();
    assert!(omega.windows(2).all(|w| w[1] > w[0]));
    assert!(column(&branch, "status").iter().all(|s| s == "ok"));
}

#[test]
fn cantor_writes_one_row_per_eta() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", CUBIC);
    let out = dir.path().join("o");
    assert_eq!(run(&["cantor"], &cfg, &out), 0);
    let dens = out.join("cantor/density.csv");
    assert_eq!(csv_rows(&dens).len(), 3);
    for d in column(&dens, "density_interval") {
        assert!(d.parse::<f64>().unwrap() >= 0.9);
    }
    assert!(out.join("cantor/summary.json").exists());
}

#[test]
fn eigcheck_with_constant_potential_has_vanishing_deviation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", CUBIC);
    let out = dir.path().join("o");
    assert_eq!(run(&["eigcheck"], &cfg, &out), 0);
    let r = column(&out.join("eigcheck/asymptotics.csv"), "r_j");
    assert_eq!(r.len(), 200);
    assert!(r.iter().all(|v| v.parse::<f64>().unwrap() <= 1e-10));
}

#[test]
fn q0_finds_dominant_first_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", CUBIC);
    let out = dir.path().join("o");
    assert_eq!(run(&["q0"], &cfg, &out), 0);
    let u0: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("q0/u0.json")).unwrap()).unwrap();
    let mut best = (0.0, 0, 0);
    for m in u0["modes"].as_array().unwrap() {
        let l = m["l"].as_u64().unwrap() as usize;
        let (re, im) = (m["re"].as_array().unwrap(), m["im"].as_array().unwrap());
        for (j, (a, b)) in re.iter().zip(im).enumerate() {
            let v = a.as_f64().unwrap().hypot(b.as_f64().unwrap());
            if v > best.0 {
                best = (v, l, j + 1);
            }
        }
    }
    assert_eq!((best.1, best.2), (1, 1));
    assert!((best.0 - (8.0f64 / 9.0).sqrt()).abs() < 0.05);
    assert!(out.join("q0/hessian.csv").exists());
}
