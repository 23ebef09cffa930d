use std::path::Path;
use std::process::{Command, Output};

fn tw(home: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timeweaver"))
        .args(args)
        .env("TIMEWEAVER_HOME", home)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn help_lists_every_subcommand() {
    let home = tempfile::tempdir().unwrap();
    let out = tw(home.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["synth", "train-encoders", "train", "restore", "eval"] {
        assert!(text.contains(sub), "missing {sub} in\n{text}");
    }
    for sub in ["synth", "train-encoders", "train", "restore", "eval"] {
        assert_eq!(tw(home.path(), &[sub, "--help"]).status.code(), Some(0));
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let home = tempfile::tempdir().unwrap();
    let out = tw(home.path(), &["restore", "--refs", "x", "--out", "y.png"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--lq"));
    assert_eq!(tw(home.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let home = tempfile::tempdir().unwrap();
    let cfg = home.path().join("bad.toml");
    std::fs::write(&cfg, "[conditioning]\nbeta = -1.0\n").unwrap();
    let out = tw(home.path(), &["--config", cfg.to_str().unwrap(), "synth", "--identities", "2", "--per-identity", "2", "--out", "d"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("conditioning.beta"));

    std::fs::write(&cfg, "foo = 1\n").unwrap();
    let out = tw(home.path(), &["--config", cfg.to_str().unwrap(), "synth", "--identities", "2", "--per-identity", "2", "--out", "d"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("foo"));

    let missing = home.path().join("nope");
    let out = tw(home.path(), &["train", "--data", missing.to_str().unwrap(), "--steps", "5"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pipeline_smoke() {
    let home = tempfile::tempdir().unwrap();
    let h = home.path();
    let p = |s: &str| h.join(s).to_string_lossy().into_owned();
    let cfg = h.join("small.toml");
    std::fs::write(&cfg, "[evalkit]\nsamples = 6\nmin_bucket = 4\n").unwrap();
    let cfg = cfg.to_string_lossy().into_owned();

    ok(&tw(h, &["synth", "--identities", "8", "--per-identity", "4", "--out", &p("train"), "--seed", "1"]));
    ok(&tw(h, &[
        "synth", "--identities", "6", "--per-identity", "5", "--out", &p("test"), "--seed", "2", "--split", "test",
        "--first-identity", "1000",
    ]));
    ok(&tw(h, &["train-encoders", "--data", &p("train"), "--steps", "30", "--seed", "1"]));
    assert!(h.join("encoders.ckpt").is_file());
    ok(&tw(h, &["--config", &cfg, "train", "--data", &p("train"), "--steps", "200", "--seed", "1"]));
    assert!(h.join("model.ckpt").is_file());

    let refs = h.join("refs");
    std::fs::create_dir_all(refs.join("masks")).unwrap();
    for k in 1..3 {
        std::fs::copy(h.join(format!("test/images/1000_{k}.png")), refs.join(format!("{k}.png"))).unwrap();
        std::fs::copy(h.join(format!("test/masks/1000_{k}.png")), refs.join(format!("masks/{k}.png"))).unwrap();
    }
    let lq = p("test/degraded/1000_0.png");
    let restore = |out: &str| {
        tw(h, &[
            "restore", "--lq", &lq, "--refs", refs.to_str().unwrap(), "--age", "40", "--steps", "5", "--seed", "3", "--out",
            out,
        ])
    };
    ok(&restore(&p("a.png")));
    ok(&restore(&p("b.png")));
    assert_eq!(std::fs::read(h.join("a.png")).unwrap(), std::fs::read(h.join("b.png")).unwrap());
    let sidecar: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(h.join("a.json")).unwrap()).unwrap();
    assert_eq!(sidecar["config"]["tau"], 40);
    assert_eq!(sidecar["trace"]["steps"].as_array().unwrap().len(), 5);
    assert!(sidecar["trace"]["steps"][0]["delta_eps_norms"].is_array());

    ok(&tw(h, &["--config", &cfg, "eval", "--suite", "guidance", "--ckpt", &p("model.ckpt"), "--data", &p("test"), "--seed", "4"]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(h.join("reports/guidance.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 3);
    assert!(h.join("reports/guidance.md").is_file());

    let runs: Vec<_> = std::fs::read_dir(h.join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 7, "one manifest per artifact-producing invocation");
}
