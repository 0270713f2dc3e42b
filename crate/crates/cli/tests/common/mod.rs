#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A ten-procedure dataset and one-epoch training: exercises every command in seconds.
pub const TOY_CONFIG: &str = r#"{
  "data": {"num_procedures": 10, "frac_with_events": 0.5, "negative_frames_per_procedure": 20},
  "train": {"epochs": 1, "classifier_epochs": 1, "batch": {"batch_size": 16}},
  "methods": ["tl_ba"],
  "eval": {"min_negative_ratio": 1.0},
  "sweep": {"embedding_sizes": [4], "imbalance": {"degrees": [1, 2], "repeats": 2}, "imbalance_epochs": 1},
  "cam": {"gallery": 2}
}"#;

pub fn rarevent(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rarevent"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn write_config(dir: &Path, json: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, json).unwrap();
    path
}

/// Relative path to contents for every file below `root`.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Files that differ between two runs, or exist in only one of them.
pub fn differing_files(a: &Path, b: &Path) -> Vec<String> {
    let (ta, tb) = (tree(a), tree(b));
    let mut names: Vec<&String> = ta.keys().chain(tb.keys()).collect();
    names.sort();
    names.dedup();
    names.into_iter().filter(|n| ta.get(*n) != tb.get(*n)).cloned().collect()
}

pub fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}
