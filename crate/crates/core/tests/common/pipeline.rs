//! The command-line pipeline at toy size: two vehicles and a one-layer
//! model, so a full generate, train and evaluate cycle takes under a second.

use std::path::Path;
use std::process::{Command, Output};

pub const SMALL: [&str; 16] = [
    "--set",
    "scenario.n_vehicles=2",
    "--set",
    "model.state_dim=12",
    "--set",
    "model.action_dim=2",
    "--set",
    "model.embed_dim=16",
    "--set",
    "model.n_layers=1",
    "--set",
    "model.n_heads=2",
    "--set",
    "model.context_len=4",
    "--set",
    "train.log_every=5",
];

pub fn aimdt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aimdt")).args(args).output().expect("binary runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = aimdt(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn with_small<'a>(threads: &'a str, rest: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--threads", threads, "--seed", "5"];
    v.extend_from_slice(&SMALL);
    v.extend_from_slice(rest);
    v
}

/// Full pipeline in `dir`; returns the bytes of every artifact.
pub fn pipeline(dir: &Path, threads: &str) -> Vec<(String, Vec<u8>)> {
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let (free, coll, mixed, ckpt, report, csv, cmp) =
        (p("free.bin"), p("coll.bin"), p("mixed.bin"), p("model.ckpt"), p("eval.txt"), p("eval.csv"), p("cmp.csv"));
    ok(&with_small(threads, &["gen-data", "--policy", "aim", "--per-combination", "1", "--out", &free]));
    ok(&with_small(threads, &["gen-data", "--policy", "uncoordinated", "--episodes", "6", "--out", &coll]));
    ok(&with_small(threads, &["mix", "--free", &free, "--collision", &coll, "--ratio", "0.25", "--out", &mixed]));
    ok(&with_small(
        threads,
        &["train", "--data", &mixed, "--iters", "2", "--steps", "10", "--batch", "4", "--out", &ckpt],
    ));
    ok(&with_small(threads, &["eval", "--ckpt", &ckpt, "--scenarios", "4", "--out", &report, "--csv", &csv]));
    ok(&with_small(threads, &["compare", "--ckpt", &ckpt, "--scenarios", "3", "--out", &cmp]));
    [free, coll, mixed, ckpt, report, csv, cmp]
        .into_iter()
        .map(|f| {
            let bytes = std::fs::read(&f).unwrap();
            (Path::new(&f).file_name().unwrap().to_string_lossy().into_owned(), bytes)
        })
        .collect()
}
