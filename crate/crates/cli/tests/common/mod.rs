#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn care(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_care"))
        .args(args)
        .output()
        .expect("spawn care")
}

/// Runs `care`, panicking with its stderr on failure; returns stdout.
pub fn care_ok(args: &[&str]) -> String {
    let out = care(args);
    assert!(
        out.status.success(),
        "care {:?} failed ({:?}): {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `root`, keyed by relative path.
pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Directory layout produced by [`pipeline`].
pub struct Pipeline {
    pub model: PathBuf,
    pub calib: PathBuf,
    pub cov: PathBuf,
    pub profile: PathBuf,
    pub converted: PathBuf,
    pub report: PathBuf,
}

/// gen → cov → schedule → convert → eval under `root`.
pub fn pipeline(root: &Path, seed: u64, gen_extra: &[&str], schedule_extra: &[&str]) -> Pipeline {
    let p = Pipeline {
        model: root.join("model"),
        calib: root.join("model/calib"),
        cov: root.join("cov"),
        profile: root.join("profile.json"),
        converted: root.join("converted"),
        report: root.join("eval.json"),
    };
    let seed = seed.to_string();
    let manifest = p.model.join("model.json");
    let mut gen = vec!["gen", "--seed", &seed, "--out", s(&p.model)];
    gen.extend_from_slice(gen_extra);
    care_ok(&gen);
    care_ok(&[
        "cov",
        "--manifest",
        s(&manifest),
        "--batches",
        s(&p.calib),
        "--out",
        s(&p.cov),
    ]);
    let mut sched = vec![
        "schedule",
        "--manifest",
        s(&manifest),
        "--cov",
        s(&p.cov),
        "--out",
        s(&p.profile),
    ];
    sched.extend_from_slice(schedule_extra);
    care_ok(&sched);
    care_ok(&[
        "convert",
        "--manifest",
        s(&manifest),
        "--cov",
        s(&p.cov),
        "--profile",
        s(&p.profile),
        "--out",
        s(&p.converted),
    ]);
    care_ok(&[
        "eval",
        "--source",
        s(&manifest),
        "--converted",
        s(&p.converted.join("model.json")),
        "--batches",
        s(&p.calib),
        "--seed",
        &seed,
        "--out",
        s(&p.report),
    ]);
    p
}

pub fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}
