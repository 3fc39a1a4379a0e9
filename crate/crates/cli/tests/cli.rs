use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use drrpose::experiments::ExperimentConfig;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_drrpose"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn smoke_config(dir: &Path) -> String {
    let path = dir.join("c.json");
    ExperimentConfig::smoke(&dir.join("work")).save(&path).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

#[test]
fn usage_errors_exit_one_and_name_the_flag() {
    let o = run(&["dataset", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--frobnicate"), "{}", stderr(&o));

    let o = run(&["dataset", "--set", "dataset.nope=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--set"), "{}", stderr(&o));

    let o = run(&["qq", "--csv", "x.csv", "--filter", "novalue"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--filter"));

    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["annotate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let o = run(&["dataset", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.json"));

    // no dataset generated yet
    let cfg = smoke_config(dir.path());
    assert_eq!(run(&["annotate", "--config", &cfg, "--eta", "1"]).status.code(), Some(2));
}

#[test]
fn overrides_change_one_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let o = run(&["dataset", "--config", &cfg, "--set", "dataset.train=5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let counts = &json(&o)["counts"];
    assert_eq!(counts["train"], 5);
    assert_eq!(counts["val"], ExperimentConfig::smoke(dir.path()).dataset.val);

    let read_meta = || std::fs::read(dir.path().join("work/dataset/train/meta.json")).unwrap();
    let first = read_meta();
    let o = run(&["dataset", "--config", &cfg, "--set", "dataset.train=5", "--seed", "99"]);
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(read_meta(), first);
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let work = dir.path().join("work");
    for args in [
        vec!["dataset", "--config", &cfg],
        vec!["sweep-noise", "--config", &cfg],
        vec!["sweep-size", "--config", &cfg],
        vec!["annotate", "--config", &cfg, "--eta", "3", "--k", "2"],
        vec!["train", "--config", &cfg, "--eta", "3", "--k", "2", "--size", "4", "--epochs", "2"],
    ] {
        let o = run(&args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    }
    for exp in ["noise_sweep", "size_sweep"] {
        for f in ["errors.csv", "summary.csv", "fit.csv", "provenance.json"] {
            assert!(work.join("results").join(exp).join(f).exists(), "{exp}/{f}");
        }
    }
    assert!(work.join("annotations/3/k2.json").exists());
    let model = work.join("models/eta_3_k2_n4.ckpt");
    assert!(model.exists());

    let o = run(&["eval", "--config", &cfg, "--model", model.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let errors = work.join("results/eval_eta_3_k2_n4/errors.csv");
    assert!(errors.exists());

    let points = dir.path().join("qq.csv");
    let size_errors = work.join("results/size_sweep/errors.csv");
    let o = run(&["qq", "--csv", size_errors.to_str().unwrap(), "--out", points.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let smoke = ExperimentConfig::smoke(&work);
    let n = 4 * smoke.dataset.test * smoke.eval.repetitions;
    assert_eq!(json(&o)["n"], n);
    assert_eq!(std::fs::read_to_string(&points).unwrap().lines().count(), n + 1);

    // one smoke condition holds too few rows for a fit
    let o = run(&[
        "qq",
        "--csv",
        work.join("results/noise_sweep/errors.csv").to_str().unwrap(),
        "--filter",
        "condition=eta_0",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("at least 20"));
    let o = run(&["qq", "--csv", errors.to_str().unwrap(), "--column", "no_such_column"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_column"));
}

#[test]
fn phantom_and_render() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let stem = dir.path().join("vol/anatomy");
    let o = run(&["phantom", "--config", &cfg, "--anatomy-seed", "5", "--out", stem.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stem.with_extension("raw").exists() && stem.with_extension("json").exists());

    let png = dir.path().join("view.png");
    let o = run(&[
        "render", "--config", &cfg, "--origin", "0,-10,5", "--axis", "0.2,1,-0.1", "--view-angle", "-15", "--out",
        png.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(std::fs::read(&png).unwrap().starts_with(b"\x89PNG"));
    assert!(json(&o)["image_pose"]["x_instr"].is_object() || json(&o)["image_pose"]["x_instr"].is_array());

    let o = run(&["render", "--config", &cfg, "--origin", "0,0", "--axis", "1,0,0", "--out", "x.png"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--origin"));
}

fn http_get(port: u16, path: &str) -> Option<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut out = String::new();
    s.read_to_string(&mut out).ok()?;
    Some(out)
}

#[test]
fn serve_answers_on_the_requested_port() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    assert_eq!(run(&["dataset", "--config", &cfg]).status.code(), Some(0));
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = bin()
        .args(["serve", "--config", &cfg, "--port", &port.to_string(), "--mode", "practice"])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    let mut reply = None;
    while start.elapsed() < Duration::from_secs(60) {
        if let Some(r) = http_get(port, "/api/tasks?annotator=a") {
            reply = Some(r);
            break;
        }
        std::thread::sleep(Duration::from_millis(200));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let reply = reply.expect("server did not answer");
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains("expert_00000"));

    let o = run(&["serve", "--config", &cfg, "--mode", "exam"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--mode"));
}

#[test]
fn shipped_configs_load_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let load = |name: &str| {
        let cfg = ExperimentConfig::load(&dir.join(name)).unwrap();
        cfg.validate().unwrap();
        cfg
    };
    let smoke = load("smoke.json");
    let expected = ExperimentConfig::smoke(Path::new("work/smoke"));
    assert_eq!(smoke, expected);

    let desk = load("desk.json");
    assert_eq!(desk.noise_sweep.etas, vec![0.0, 2.0, 4.0]);
    assert_eq!(desk.size_sweep.sizes, vec![63, 250, 1000]);
    assert!(!desk.size_sweep.triple_annotation);
    assert_eq!(desk.dataset, drrpose::experiments::DatasetSpec::default());

    let full = load("full.json");
    assert_eq!(full.dataset, drrpose::experiments::DatasetSpec::full_scale());
}
