use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn cli(out: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brainsimsiam"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("BRAINSIMSIAM_OUT")
        .output()
        .unwrap()
}

fn ok(out: &Path, config: &Path, args: &[&str]) {
    let o = cli(out, config, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn run_dir(out: &Path) -> PathBuf {
    let entries: Vec<PathBuf> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(entries.len(), 1, "{entries:?}");
    entries.into_iter().next().unwrap()
}

fn tables(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|x| x.to_str()), Some("tsv" | "json" | "toml")) {
                if p.file_name().unwrap() != "timing.tsv" {
                    found.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
    }
    found.sort();
    found
}

#[test]
fn smoke_pipeline_is_reproducible() {
    let config = smoke_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for out in [a.path(), b.path()] {
        for cmd in ["synth", "pretrain", "probe", "correlate", "explain"] {
            ok(out, &config, &[cmd]);
        }
    }
    let (ra, rb) = (run_dir(a.path()), run_dir(b.path()));
    assert_eq!(ra.file_name(), rb.file_name());
    assert!(ra.file_name().unwrap().to_str().unwrap().ends_with("-seed0"));
    for f in ["config.toml", "VERSION", "checkpoint/train_log.tsv", "probe/metrics.tsv", "correlate/correlation.tsv", "explain/importance.tsv"] {
        assert!(ra.join(f).is_file(), "{f}");
    }
    let (ta, tb) = (tables(&ra), tables(&rb));
    assert!(ta.len() >= 8);
    assert_eq!(ta, tb);

    let again = cli(a.path(), &config, &["probe"]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("write-once"));
}

#[test]
fn probe_before_pretrain_names_the_checkpoint() {
    let out = tempfile::tempdir().unwrap();
    let config = smoke_config();
    ok(out.path(), &config, &["synth"]);
    let o = cli(out.path(), &config, &["probe"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("checkpoint not found") && err.contains("brainsimsiam pretrain"), "{err}");
}

#[test]
fn missing_dataset_is_reported() {
    let out = tempfile::tempdir().unwrap();
    let o = cli(out.path(), &smoke_config(), &["pretrain"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset not found"));
}

#[test]
fn bad_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[train]\nepochs = 2\nlearning_rte = 0.1\n").unwrap();
    let o = cli(&dir.path().join("runs"), &config, &["synth"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rte"));
}

#[test]
fn seed_override_changes_the_run_directory() {
    let out = tempfile::tempdir().unwrap();
    let config = smoke_config();
    let o = Command::new(env!("CARGO_BIN_EXE_brainsimsiam"))
        .args(["synth", "--seed", "7", "--config"])
        .arg(&config)
        .env("BRAINSIMSIAM_OUT", out.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(out.path());
    assert!(dir.to_str().unwrap().ends_with("-seed7"));
    assert!(fs::read_to_string(dir.join("config.toml")).unwrap().contains("seed = 7"));
}
