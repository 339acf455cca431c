#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_prescribe"));
    c.env("PRESCRIBE_THREADS", "1");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Write `body` as `config.toml` in `dir`, with `output` pointing at `out`.
pub fn config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, format!("output = \"{name}_out\"\n{body}")).unwrap();
    path
}

pub fn out_dir(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}_out"))
}

pub fn verify(dir: &Path) -> Output {
    let report = dir.join("report.json");
    run(&["verify", report.to_str().unwrap(), dir.to_str().unwrap()])
}

/// Multiply the value on data line `line` (0-based, header excluded) of a
/// field dump by `factor`.
pub fn perturb(path: &Path, line: usize, factor: f64) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let target = &mut lines[line + 1];
    let mut parts: Vec<String> = target.split(',').map(String::from).collect();
    let v: f64 = parts.last().unwrap().parse().unwrap();
    *parts.last_mut().unwrap() = format!("{:e}", v * factor);
    *target = parts.join(",");
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

pub const NEG_CYLINDER: &str = r#"
scenario = "han_li_negative"

[manifold]
topology = "cylinder"
n = 3
shape = [9, 8, 8]
lengths = [1.0, 1.0, 1.0]

[fields.R]
preset = "constant"
c = -1.0
"#;

pub const GAUSS_32: &str = r#"
scenario = "gauss2d"

[manifold]
topology = "torus"
n = 2
shape = [32, 32]
lengths = [1.0, 1.0]

[fields.K]
preset = "sinusoid_shift"
amplitude = 1.0
shift = -0.2
axis = 1
"#;
