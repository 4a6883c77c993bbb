#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small raw event log with three sensitive cohorts and a non-sensitive
/// pool. Patients with `300` have raised odds for the first few medications.
pub fn write_synthetic_log(path: &Path, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("patient_id,category,code,value,ref_low,ref_high\n");
    for p in 0..600 {
        let id = format!("P{p:05}");
        let cohort = match p % 10 {
            0 | 1 => Some("300.02"),
            2 => Some("626.4"),
            3 => Some("042"),
            _ => None,
        };
        if let Some(code) = cohort {
            let _ = writeln!(out, "{id},diagnosis,{code},,,");
        }
        let n_dx = if cohort.is_some() {
            rng.gen_range(1..15)
        } else {
            rng.gen_range(0..8)
        };
        for _ in 0..n_dx {
            let _ = writeln!(out, "{id},diagnosis,D{:03},,,", rng.gen_range(0..40));
        }
        for m in 0..60 {
            let boost = cohort == Some("300.02") && m < 5;
            if rng.gen_bool(if boost { 0.6 } else { 0.15 }) {
                let _ = writeln!(out, "{id},medication,M{m:02},,,");
            }
        }
        for q in 0..30 {
            if rng.gen_bool(0.1) {
                let _ = writeln!(out, "{id},procedure,Q{q:02},,,");
            }
        }
        for l in 0..15 {
            if rng.gen_bool(0.5) {
                let v: f64 = rng.gen_range(0.0..30.0);
                let _ = writeln!(out, "{id},lab,L{l:02},{v:.2},10,20");
            }
        }
    }
    std::fs::write(path, out).unwrap();
}

/// Every file under `root` with its contents, keyed by relative path.
pub fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                files.push((path.strip_prefix(root).unwrap().to_path_buf(), bytes));
            }
        }
    }
    files.sort();
    files
}
