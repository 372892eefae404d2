use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use meshrecover_core::camera::{DepthUVFrame, Intrinsics};
use meshrecover_core::config::RunConfig;
use meshrecover_core::obj::ObjMesh;
use meshrecover_core::{load_template, toy};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_meshrecover"));
    c.env("MESHRECOVER_THREADS", "1");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    run(dir, args).status.code().expect("exit code")
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.training.steps = 3;
    cfg.training.batch_size = 2;
    cfg.eval.baseline_iterations = 20;
    let p = dir.join("cfg.json");
    std::fs::write(&p, cfg.to_json()).unwrap();
    p
}

fn pipeline(dir: &Path, cfg: &Path) {
    let cfg = cfg.to_str().unwrap();
    ok(dir, &["gen-data", "--toy", "3", "--config", cfg, "--out", "data"]);
    ok(dir, &["train", "--config", cfg, "--data", "data", "--out", "run", "--log-every", "0"]);
    ok(
        dir,
        &["eval", "--config", cfg, "--ckpt", "run", "--data", "data", "--report", "report.json"],
    );
}

#[test]
fn pipeline_reruns_are_bit_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small_config(a.path());
    pipeline(a.path(), &cfg);
    pipeline(b.path(), &cfg);
    for f in [
        "data/samples.tens",
        "data/manifest.json",
        "run/model.tens",
        "run/model.tens.json",
        "run/metrics.jsonl",
        "run/manifest.json",
        "report.json",
    ] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn render_match_infer_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let cfg = small_config(p);
    let cfg = cfg.to_str().unwrap();
    ok(p, &["render", "--toy-pose", "1", "--azimuth", "-20", "--out", "f.tens", "--gt", "gt.obj"]);
    let stats = ok(p, &["match", "--frame", "f.tens", "--out", "partial.tens"]);
    let v: serde_json::Value = serde_json::from_str(stats.trim()).unwrap();
    assert!(v["visible"].as_u64().unwrap() > 10, "{v}");
    assert_eq!(v["vertices"].as_u64().unwrap() as usize, toy::coarse_count());

    ok(p, &["gen-data", "--toy", "2", "--config", cfg, "--out", "data"]);
    ok(p, &["train", "--config", cfg, "--data", "data", "--out", "run", "--log-every", "0"]);
    let a = ok(p, &["infer", "--ckpt", "run", "--frame", "f.tens", "--out", "a.obj"]);
    let b = ok(p, &["infer", "--ckpt", "run/model.tens", "--partial", "partial.tens", "--out", "b.obj"]);
    assert_eq!(a, b);
    // The partial archive stores f32 vertices; the frame path lifts in f64.
    let ma = ObjMesh::read(p.join("a.obj")).unwrap();
    let mb = ObjMesh::read(p.join("b.obj")).unwrap();
    assert_eq!(ma.positions.len(), toy::toy_template().n_full());
    assert_eq!(ma.triangles, mb.triangles);
    for (x, y) in ma.positions.iter().zip(&mb.positions) {
        assert!((x - y).norm() < 1e-5, "{x} vs {y}");
    }
    assert!(p.join("a.visibility.json").exists());
}

#[test]
fn exit_codes_follow_error_class() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert_eq!(code(p, &["no-such-command"]), 1);
    assert_eq!(code(p, &["gen-data", "--toy", "2"]), 1);

    std::fs::write(p.join("bad.json"), r#"{"training": {"lr": -1}}"#).unwrap();
    assert_eq!(code(p, &["gen-data", "--toy", "2", "--config", "bad.json", "--out", "x"]), 1);
    std::fs::write(p.join("unknown.json"), r#"{"trainin": {}}"#).unwrap();
    assert_eq!(code(p, &["gen-data", "--toy", "2", "--config", "unknown.json", "--out", "x"]), 1);
    assert_eq!(bin().env("MESHRECOVER_THREADS", "zero").current_dir(p).args(["selfcheck"]).output().unwrap().status.code(), Some(1));

    assert_eq!(code(p, &["match", "--frame", "missing.tens", "--out", "x.tens"]), 3);
    std::fs::write(p.join("junk.tens"), b"not a tensor archive").unwrap();
    std::fs::write(p.join("junk.json"), b"{}").unwrap();
    assert_eq!(code(p, &["match", "--frame", "junk.tens", "--out", "x.tens"]), 3);

    // An empty frame matches nothing, so completion has no anchor.
    let cfg = small_config(p);
    let cfg = cfg.to_str().unwrap();
    ok(p, &["gen-data", "--toy", "2", "--config", cfg, "--out", "data"]);
    ok(p, &["train", "--config", cfg, "--data", "data", "--out", "run", "--log-every", "0"]);
    DepthUVFrame::empty(Intrinsics::default()).write(p.join("empty.tens")).unwrap();
    assert_eq!(code(p, &["infer", "--ckpt", "run", "--frame", "empty.tens", "--out", "m.obj"]), 2);
    assert_eq!(code(p, &["infer", "--ckpt", "data", "--frame", "empty.tens", "--out", "m.obj"]), 3);
}

#[test]
fn selfcheck_passes() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(d.path(), &["selfcheck", "--report", "sc.json"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 3, "{out}");
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("sc.json")).unwrap()).unwrap();
    assert_eq!(v["passed"], true);
}

#[test]
fn bundled_template_matches_builtin() {
    let bundled = load_template(repo_root().join("assets/toy_template")).unwrap();
    assert_eq!(bundled.content_hash(), toy::toy_template().content_hash());
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["export-template", "--out", "t"]);
    for f in ["mesh.obj", "downsample.mat", "regressor.mat", "meta.json"] {
        assert_eq!(
            std::fs::read(d.path().join("t").join(f)).unwrap(),
            std::fs::read(repo_root().join("assets/toy_template").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn bundled_configs_parse() {
    let default = RunConfig::load(repo_root().join("configs/default.json")).unwrap();
    assert_eq!(default, RunConfig::default());
    for e in std::fs::read_dir(repo_root().join("configs")).unwrap() {
        RunConfig::load(e.unwrap().path()).unwrap();
    }
}

#[test]
fn cli_reference_is_current() {
    let d = tempfile::tempdir().unwrap();
    let now = ok(d.path(), &["help-markdown"]);
    let saved = std::fs::read_to_string(repo_root().join("docs/cli.md")).unwrap();
    assert!(now == saved, "docs/cli.md is stale; regenerate with `meshrecover help-markdown > docs/cli.md`");
}
