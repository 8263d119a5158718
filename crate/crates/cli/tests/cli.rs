use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use agglo_core::checkpoint::read_manifest;

fn agglo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agglo"))
        .args(args)
        .env_remove("AMRD_SEED")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn smoke() -> String {
    configs().join("smoke.json").display().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(dir: &Path, extra: &[&str]) -> Output {
    let cfg = smoke();
    let mut args = vec!["train", "--config", &cfg, "--out", s(dir)];
    args.extend_from_slice(extra);
    agglo(&args)
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let o = agglo(&["train", "--config", "/no/such/run.json"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/no/such/run.json"));
    assert!(stdout(&o).is_empty());
}

#[test]
fn smoke_run_writes_a_self_describing_directory() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 1);
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
    assert!(csv.starts_with("step,lr,loss_total,"));
    for f in ["config.json", "config_hash.txt", "partition.json", "checkpoints/step_000025.amrd", "checkpoints/step_000050.amrd"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn step_override_is_recorded_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--set", "trainer.steps=100", "--set", "trainer.checkpoint_every=0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let bytes = fs::read(dir.path().join("checkpoints/step_000100.amrd")).unwrap();
    let (manifest, _) = read_manifest(&bytes).unwrap();
    assert_eq!(manifest.step, 100);
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["trainer"]["steps"], 100);
}

#[test]
fn bad_override_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(dir.path(), &["--set", "trainer.stepz=3"])), 2);
    assert_eq!(code(&train(dir.path(), &["--set", "trainer.steps"])), 2);
}

#[test]
fn seed_env_changes_the_run() {
    let run = |seed: Option<&str>| {
        let dir = tempfile::tempdir().unwrap();
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_agglo"));
        cmd.args(["train", "--config", &smoke(), "--out", s(dir.path()), "--set", "trainer.steps=10"]);
        cmd.env_remove("AMRD_SEED");
        if let Some(v) = seed {
            cmd.env("AMRD_SEED", v);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read_to_string(dir.path().join("metrics.csv")).unwrap()
    };
    assert_eq!(run(None), run(Some("7")));
    assert_ne!(run(None), run(Some("8")));
}

#[test]
fn eradio_at_an_unsupported_resolution_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--set", "student.kind=eradio"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("32"));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--set", "trainer.lr=1e30", "--set", "trainer.warmup_steps=0"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn cli_resume_matches_an_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(full.path(), &["--set", "trainer.steps=30", "--set", "trainer.checkpoint_every=10"])), 0);
    let part = tempfile::tempdir().unwrap();
    let ck = full.path().join("checkpoints/step_000010.amrd");
    let o = train(part.path(), &["--set", "trainer.steps=30", "--set", "trainer.checkpoint_every=10", "--resume", s(&ck)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = |p: &Path, skip: usize| fs::read_to_string(p.join("metrics.csv")).unwrap().lines().skip(skip).map(str::to_string).collect::<Vec<_>>();
    // a fresh run directory holds only the resumed steps
    let resumed = rows(part.path(), 1);
    assert_eq!(resumed.len(), 20);
    assert_eq!(rows(full.path(), 11), resumed);
    assert_eq!(
        fs::read(full.path().join("checkpoints/step_000030.amrd")).unwrap(),
        fs::read(part.path().join("checkpoints/step_000030.amrd")).unwrap()
    );
}

#[test]
fn eval_is_repeatable_and_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(dir.path(), &["--set", "trainer.steps=10"])), 0);
    let ck = dir.path().join("checkpoints/step_000010.amrd");
    let r1 = dir.path().join("a.json");
    let r2 = dir.path().join("b.json");
    let cfg = smoke();
    for r in [&r1, &r2] {
        let o = agglo(&["eval", "--checkpoint", s(&ck), "--config", &cfg, "--set", "trainer.steps=10", "--out", s(r)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(stdout(&o).lines().count(), 1);
        assert!(stdout(&o).starts_with("knn_top1="));
    }
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r2).unwrap());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&r1).unwrap()).unwrap();
    for key in ["knn_top1", "zero_shot_top1", "linear_probe_miou", "config_hash", "checkpoint_hash"] {
        assert!(report.get(key).is_some(), "{key}");
    }

    // flip one byte near the end, inside the tensor blobs
    let mut bytes = fs::read(&ck).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x40;
    let bad = dir.path().join("bad.amrd");
    fs::write(&bad, &bytes).unwrap();
    let o = agglo(&["eval", "--checkpoint", s(&bad), "--config", &cfg, "--set", "trainer.steps=10"]);
    assert_eq!(code(&o), 4);
    assert!(stdout(&o).is_empty());

    // a different teacher seed does not match the recorded hash
    let o = agglo(&["eval", "--checkpoint", s(&ck), "--config", &cfg, "--set", "teachers.0.seed=5"]);
    assert_eq!(code(&o), 4);
}

fn loss_headers(csv: &str) -> Vec<String> {
    csv.lines()
        .next()
        .unwrap()
        .split(',')
        .filter(|h| *h != "step" && *h != "lr" && !h.starts_with("w_"))
        .map(str::to_string)
        .collect()
}

#[test]
fn plot_writes_one_polyline_per_loss_column() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(dir.path(), &[])), 0);
    let csv = dir.path().join("metrics.csv");
    let svg = dir.path().join("loss.svg");
    let o = agglo(&["plot", s(&csv), s(&svg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&svg).unwrap();
    let doc = roxmltree::Document::parse(&text).expect("well-formed XML");
    let lines: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("polyline")).collect();
    let expected = loss_headers(&fs::read_to_string(&csv).unwrap());
    assert_eq!(lines.len(), expected.len());
    for l in &lines {
        assert_eq!(l.attribute("points").unwrap().split(' ').count(), 50);
    }
    let legend: Vec<String> = doc
        .descendants()
        .filter(|n| n.has_tag_name("text") && n.attribute("class") == Some("legend"))
        .map(|n| n.text().unwrap().to_string())
        .collect();
    assert_eq!(legend, expected);
}

#[test]
fn plot_rejects_bad_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let svg = dir.path().join("out.svg");
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "step,lr,loss_total\n1,0.1,2.0\n2,0.1,oops\n").unwrap();
    let o = agglo(&["plot", s(&bad), s(&svg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    assert_eq!(code(&agglo(&["plot", s(&empty), s(&svg)])), 2);
    let header_only = dir.path().join("header.csv");
    fs::write(&header_only, "step,lr,loss_total\n").unwrap();
    assert_eq!(code(&agglo(&["plot", s(&header_only), s(&svg)])), 2);
    assert_eq!(code(&agglo(&["plot", s(&dir.path().join("none.csv")), s(&svg)])), 2);
    assert!(!svg.exists());
}

fn bench_config(dir: &Path, models: &str) -> PathBuf {
    let p = dir.join("bench.json");
    fs::write(&p, format!(r#"{{ "iters": 25, "models": [{models}] }}"#)).unwrap();
    p
}

#[test]
fn bench_writes_one_row_per_model() {
    let dir = tempfile::tempdir().unwrap();
    let models = r#"{ "name": "v", "resolution": 32, "student": { "kind": "vit", "vit": { "depth": 1 } } },
                    { "name": "e", "resolution": 64, "student": { "kind": "eradio" } }"#;
    let cfg = bench_config(dir.path(), models);
    let run = |out: &Path| {
        let o = agglo(&["bench", "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read_to_string(out).unwrap()
    };
    let a = run(&dir.path().join("a.csv"));
    let b = run(&dir.path().join("b.csv"));
    assert_eq!(a.lines().count(), 3);
    assert_eq!(a.lines().next().unwrap(), "model,resolution,params,flops,median_latency_us");
    // everything but the latency is machine independent
    let stable = |t: &str| t.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>();
    assert_eq!(stable(&a), stable(&b));
}

#[test]
fn bench_rejects_eradio_off_the_32_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bench_config(dir.path(), r#"{ "resolution": 48, "student": { "kind": "eradio" } }"#);
    let o = agglo(&["bench", "--config", s(&cfg), "--out", s(&dir.path().join("x.csv"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn shipped_configs_parse() {
    for name in ["smoke.json", "three_teachers.json", "eradio.json", "probe.json"] {
        let p = configs().join(name);
        let cfg = agglo_core::RunConfig::load(&p).unwrap();
        cfg.validate().unwrap();
    }
    agglo_core::bench::BenchConfig::load(&configs().join("bench.json")).unwrap().validate().unwrap();
}
