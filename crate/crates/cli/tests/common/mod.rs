#![allow(dead_code)]

use std::path::{Path, PathBuf};

/// Small plan: 3 target images of 32x32, 4x4 grid, a few iterations.
pub fn tiny_plan(dir: &Path, seeds: &str, arms: &[(&str, &str)]) -> PathBuf {
    let mut text = format!(
        "seeds = {seeds}\noutput = results\npanels = 1\n\
         [dataset]\nn_source = 4\nn_target = 3\nn_val = 2\nheight = 32\nwidth = 32\n\
         [uda]\niterations = 4\nwidth = 4\ndisc_width = 4\n\
         [weak]\niterations = 4\nwidth = 4\ndisc_width = 4\n\
         [acquisition]\ngrid_m = 4\ngrid_n = 4\nK = 2\npoints_per_patch = 3\n"
    );
    for (name, body) in arms {
        text.push_str(&format!("[arm {name}]\n{body}\n"));
    }
    let path = dir.join("plan.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

/// Relative paths of every file under `root`, sorted.
pub fn listing(root: &Path) -> Vec<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
