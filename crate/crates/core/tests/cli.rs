mod common;

use std::path::Path;

use common::pipeline::{aimdt, ok, pipeline, SMALL};

#[test]
fn pipeline_is_byte_identical_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let one = pipeline(a.path(), "1");
    let two = pipeline(b.path(), "2");
    let again = pipeline(c.path(), "1");
    for ((name, x), ((_, y), (_, z))) in one.iter().zip(two.iter().zip(&again)) {
        assert!(!x.is_empty(), "{name} is empty");
        assert!(x == y, "{name} differs between 1 and 2 threads");
        assert!(x == z, "{name} differs between repeated runs");
    }
}

#[test]
fn seed_changes_the_data() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a.bin");
    let b = d.path().join("b.bin");
    let gen = |seed: &str, out: &Path| {
        let mut args = vec!["--seed", seed];
        args.extend_from_slice(&SMALL);
        args.extend_from_slice(&["gen-data", "--policy", "aim", "--per-combination", "1", "--out", out.to_str().unwrap()]);
        ok(&args);
    };
    gen("1", &a);
    gen("2", &b);
    assert_ne!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(aimdt(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(aimdt(&["gen-data", "--policy", "aim"]).status.code(), Some(2));
    assert_eq!(aimdt(&["--threads", "x", "schedule"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one_and_a_message() {
    let out = aimdt(&["--set", "world.dt=-1", "schedule"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = aimdt(&["eval", "--ckpt", "/nonexistent/model.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    let out = aimdt(&["--threads", "0", "schedule"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn schedule_prints_a_crossing_order() {
    let out = ok(&["--seed", "3", "schedule", "--vehicles", "3"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("makespan"), "{text}");
    assert_eq!(text, String::from_utf8(ok(&["--seed", "3", "schedule", "--vehicles", "3"]).stdout).unwrap());
}

#[test]
fn plot_writes_svg() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("ep.svg");
    ok(&["--seed", "2", "plot", "--policy", "uncoordinated", "--vehicles", "3", "--out", out.to_str().unwrap()]);
    let svg = std::fs::read_to_string(out).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}
