use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_stylegrid");

fn run(args: &[&str]) -> Output {
    let out = Command::new(BIN).args(args).output().expect("spawn stylegrid");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.txt");
    std::fs::write(
        &path,
        "image_size = 16\nviews = 4\npretrain_iterations = 30\nstage1_iterations = 2\nstage2_iterations = 2\n",
    )
    .unwrap();
    path
}

#[test]
fn stylizes_a_toy_view_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = tiny_config(d);
    let c = p(&cfg);
    let (toy, scene, s1, s2) = (d.join("toy"), d.join("scene"), d.join("s1"), d.join("s2"));
    let views = toy.join("content/cameras.txt");
    assert!(run(&["--config", c, "gen-toy-scene", "--out", p(&toy), "--style-size", "32", "--trajectory-frames", "2"]).status.success());
    assert!(run(&["--config", c, "pretrain-scene", "--views", p(&views), "--out", p(&scene)]).status.success());
    assert!(run(&["--config", c, "train-grid", "--scene", p(&scene), "--views", p(&views), "--out", p(&s1)]).status.success());
    let styles = toy.join("styles/train");
    assert!(run(&[
        "--config", c, "train-style", "--model", p(&s1), "--scene", p(&scene), "--views", p(&views),
        "--styles", p(&styles), "--out", p(&s2),
    ])
    .status
    .success());
    let frame = d.join("frame.png");
    let style = toy.join("styles/heldout/style_00.png");
    let out = run(&[
        "--config", c, "stylize", "--model", p(&s2), "--scene", p(&scene), "--views", p(&views),
        "--style", p(&style), "--view", "0", "--out", p(&frame),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let img = image::open(&frame).unwrap();
    assert_eq!((img.width(), img.height()), (16, 16));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.txt");
    std::fs::write(&cfg, "seed = 3\nfoo = 1\n").unwrap();
    let out = run(&["--config", p(&cfg), "gen-toy-scene", "--out", p(&tmp.path().join("toy"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("foo"));
    assert!(!tmp.path().join("toy").exists());
}

#[test]
fn missing_arguments_exit_with_usage() {
    assert_eq!(run(&["stylize"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn untrained_style_scene_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = tiny_config(d);
    let c = p(&cfg);
    let (toy, scene, s1) = (d.join("toy"), d.join("scene"), d.join("s1"));
    let views = toy.join("content/cameras.txt");
    assert!(run(&["--config", c, "gen-toy-scene", "--out", p(&toy), "--trajectory-frames", "1"]).status.success());
    assert!(run(&["--config", c, "pretrain-scene", "--views", p(&views), "--out", p(&scene)]).status.success());
    assert!(run(&["--config", c, "train-grid", "--scene", p(&scene), "--views", p(&views), "--out", p(&s1)]).status.success());
    let out = run(&[
        "--config", c, "stylize-3d", "--model", p(&s1), "--scene", p(&scene), "--views", p(&views),
        "--trajectory", p(&toy.join("trajectory.txt")), "--front-content", "0",
        "--style-views", p(&toy.join("style_object/cameras.txt")), "--out", p(&d.join("frames")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("untrained"));
}

#[test]
fn property_checks_pass() {
    let out = run(&["check-properties", "--draws", "100", "--probes", "2"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    print!("{stdout}");
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout.lines().all(|l| l.starts_with("PASS ")));
}
