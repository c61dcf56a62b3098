#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TINY: &str = r#"
seed = 5
few_shot_ratio = 0.5
scene_regularization = false

[source]
name = "source"
count_range = [1, 6]
blob_sigma_px = 2.0
background = "gradient"
brightness = 0.9
noise_std = 0.01
image_size = [16, 16]

[target]
name = "target"
count_range = [1, 4]
blob_sigma_px = 3.0
background = "flat"
brightness = 0.4
noise_std = 0.05
image_size = [16, 16]

[sizes]
source_train = 6
source_val = 2
source_test = 2
target_train = 4
target_val = 2
target_test = 3

[train]
iterations = 4
val_interval = 2
source_batch = 2
target_batch = 2
"#;

pub fn nlt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nlt"))
        .args(args)
        .env_remove(nlt_cli::config::OUT_ROOT_ENV)
        .output()
        .expect("run nlt")
}

pub fn ok(args: &[&str]) -> String {
    let o = nlt(args);
    assert!(
        o.status.success(),
        "nlt {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

pub fn fail(args: &[&str]) -> String {
    let o = nlt(args);
    assert!(!o.status.success(), "nlt {args:?} unexpectedly succeeded");
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic should be one line: {err}");
    err
}

pub fn config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join(format!("cfg{}.toml", fs::read_dir(dir).unwrap().count()));
    fs::write(&p, format!("{extra}\n{TINY}")).unwrap();
    p
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != nlt_cli::config::RESOLVED_CONFIG_FILE {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

