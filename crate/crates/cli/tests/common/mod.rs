//! Shared helpers for the CLI test suites.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dialectid"))
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn run_err(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        !out.status.success(),
        "command {:?} unexpectedly succeeded: {}",
        args,
        String::from_utf8_lossy(&out.stdout)
    );
    out
}

/// Deterministic little 3-class corpus; class words are distinct, `USER` and
/// `URL` appear in a few rows.
pub fn write_corpus(path: &Path, rows: usize) -> PathBuf {
    let pools = [
        ["ra", "ku", "mi", "to"],
        ["za", "be", "lo", "fi"],
        ["ny", "du", "ve", "pa"],
    ];
    let mut text = String::new();
    for i in 0..rows {
        let class = i % 3;
        let pool = pools[class];
        let len = 3 + (i * 7 % 5);
        let mut words: Vec<&str> = (0..len).map(|j| pool[(i + j) % 4]).collect();
        if i % 5 == 0 {
            words.insert(0, "USER");
        }
        if i % 7 == 0 {
            words.push("URL");
        }
        text.push_str(&format!("ex{}\t{}\tC{}\n", i, words.join(" "), class));
    }
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}

/// Minimal desk-scale run config pointing at the given paths.
pub fn write_run_config(
    path: &Path,
    train: &Path,
    dev: &Path,
    vocab: &Path,
    out_dir: &Path,
    extra: &str,
) {
    let body = format!(
        r#"seed = 7

[data]
train = "{}"
dev = "{}"
vocab = "{}"
max_len = 12

[model]
num_layers = 1
hidden = 16
heads = 2
ffn_dim = 32
max_positions = 16

[training]
batch_size = 8
eval_every = 5
patience = 10
warmup_steps = 10
lr_rest = 1e-3
max_steps = 30

[output]
dir = "{}"
{}"#,
        train.display(),
        dev.display(),
        vocab.display(),
        out_dir.display(),
        extra
    );
    std::fs::write(path, body).unwrap();
}
