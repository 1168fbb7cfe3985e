use phi4lab::output::{read_fields, RunManifest};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const COMMANDS: [&str; 5] = ["symbols", "renorm", "simulate", "tail", "equivalence"];

fn quick_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.json")
}

fn phi4lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phi4lab")).args(args).output().expect("spawn phi4lab")
}

fn run_ok(args: &[&str]) {
    let o = phi4lab(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

/// Every output file except the manifest, keyed by relative path.
fn outputs(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                files.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn manifest(root: &Path) -> RunManifest {
    serde_json::from_slice(&fs::read(root.join("manifest.json")).unwrap()).unwrap()
}

fn write_config(dir: &Path, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(quick_config()).unwrap()).unwrap();
    edit(&mut v);
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_vec_pretty(&v).unwrap()).unwrap();
    p
}

#[test]
fn outputs_are_byte_identical_across_runs_and_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config();
    let cfg = cfg.to_str().unwrap();
    for cmd in COMMANDS {
        let a = tmp.path().join(format!("{cmd}-1"));
        let b = tmp.path().join(format!("{cmd}-2"));
        let c = tmp.path().join(format!("{cmd}-3"));
        run_ok(&[cmd, "--config", cfg, "--threads", "1", "--out", a.to_str().unwrap()]);
        run_ok(&[cmd, "--config", cfg, "--threads", "2", "--out", b.to_str().unwrap()]);
        run_ok(&[cmd, "--config", cfg, "--threads", "1", "--out", c.to_str().unwrap()]);
        let (fa, fb, fc) = (outputs(&a), outputs(&b), outputs(&c));
        assert!(!fa.is_empty(), "{cmd} wrote nothing");
        assert_eq!(fa, fb, "{cmd}: outputs differ between 1 and 2 threads");
        assert_eq!(fa, fc, "{cmd}: outputs differ between runs");

        let (mut ma, mut mb) = (manifest(&a), manifest(&b));
        assert_eq!(ma.command, cmd);
        // The echo differs only in the output directory.
        ma.config.as_object_mut().unwrap().remove("output_dir");
        mb.config.as_object_mut().unwrap().remove("output_dir");
        assert_eq!(ma.config, mb.config);
        assert_eq!(ma.replica_seeds, mb.replica_seeds);
        let digests = |m: &RunManifest| m.files.iter().map(|f| (f.path.clone(), f.sha256.clone())).collect::<Vec<_>>();
        assert_eq!(digests(&ma), digests(&mb));
        assert_eq!(ma.files.len(), fa.len(), "{cmd}: manifest inventory incomplete");
    }
}

#[test]
fn subcommands_write_their_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config();
    let expected: [(&str, &[&str]); 5] = [
        ("symbols", &["symbols.csv", "c_tilde.csv", "catalog.json"]),
        ("renorm", &["renorm.csv", "renorm_fit.json"]),
        ("simulate", &["simulate.csv", "summary.json", "fields/v.bin", "fields/v.json"]),
        ("tail", &["tail_0.csv", "tail_1.csv", "fit_0.json", "fit_1.json", "report.json", "t_scaling.csv"]),
        ("equivalence", &["gap_path.csv", "seed_sweep.csv", "equivalence.json"]),
    ];
    for (cmd, files) in expected {
        let out = tmp.path().join(cmd);
        run_ok(&[cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        for f in files {
            assert!(out.join(f).is_file(), "{cmd} did not write {f}");
        }
    }

    let renorm = fs::read_to_string(tmp.path().join("renorm/renorm.csv")).unwrap();
    let mut lines = renorm.lines();
    assert!(lines.next().unwrap().starts_with("n,c,c_tilde"));
    assert_eq!(lines.count(), 3);

    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("tail/report.json")).unwrap()).unwrap();
    assert_eq!(report["curves"].as_array().unwrap().len(), 2);
    assert_eq!(report["slope_ratios"].as_array().unwrap().len(), 2);
}

#[test]
fn field_dumps_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    run_ok(&["simulate", "--config", quick_config().to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let (header, fields) = read_fields(&out.join("fields/v")).unwrap();
    assert_eq!(header.dtype, "<f8");
    assert_eq!(header.shape, [header.times.len(), 256]);
    assert_eq!(fields.len(), header.times.len());
    assert!(fields[0].values.iter().all(|&x| x == 0.0));
    let bytes = fs::read(out.join("fields/v.bin")).unwrap();
    assert_eq!(bytes.len(), 8 * 256 * fields.len());
    let last = fields.last().unwrap();
    let k = bytes.len() - 8 * 256;
    assert_eq!(f64::from_le_bytes(bytes[k..k + 8].try_into().unwrap()), last.values[0]);
}

#[test]
fn seed_override_changes_the_noise() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "99", "--out", b.to_str().unwrap()]);
    assert_eq!(manifest(&b).master_seed, 99);
    assert_ne!(fs::read(a.join("simulate.csv")).unwrap(), fs::read(b.join("simulate.csv")).unwrap());
}

#[test]
fn invalid_config_names_every_offending_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), |v| {
        v["cutoff"] = 20.into();
        v["eps"] = 0.5.into();
        v["tail"]["levels"] = serde_json::json!([0.01, 0.5]);
    });
    let o = phi4lab(&["renorm", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    for field in ["cutoff", "eps", "tail.levels"] {
        assert!(err.contains(field), "missing {field} in: {err}");
    }
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn unknown_config_field_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), |v| v["cutof"] = 4.into());
    let o = phi4lab(&["symbols", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cutof"));
}

#[test]
fn blow_up_reports_time_and_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), |v| v["ceiling"] = 1e-6.into());
    let o = phi4lab(&["simulate", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    for needle in ["blow-up at t =", "sigma = 0.1", "dt = 0.005", "master_seed = 3"] {
        assert!(err.contains(needle), "missing {needle:?} in: {err}");
    }
}

#[test]
fn verify_passes_and_catches_injected_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let good = tmp.path().join("good");
    let o = phi4lab(&["verify", "--out", good.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(good.join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);

    let bad = tmp.path().join("bad");
    let o = phi4lab(&["verify", "--fault", "widened-partition", "--out", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("FAIL partition_of_unity")), "{stdout}");

    let o = phi4lab(&["verify", "--fault", "bogus", "--out", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_threads_is_rejected() {
    let o = phi4lab(&["renorm", "--threads", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--threads"));
}
