use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data.synthetic]
users = 60
items = 40
overlap = 50
interactions = 6

[encoder]
dim = 4

[train]
epochs = 1
group_size = 8

[cpa]
centroids = 2

[flow]
hidden = 6
layers = 1

[eval]
pool_size = 20
"#;

fn cider(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cider"))
        .current_dir(dir)
        .env_remove("CIDER_OUT")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn train_then_evaluate() {
    let dir = setup();
    let d = dir.path();
    ok(&cider(d, &["--config", "tiny.toml", "--out", "run", "train"]));
    for f in ["config.json", "encoder.ckpt", "flow.ckpt", "centroids.jsonl", "loss.csv", "manifest.json"] {
        assert!(d.join("run").join(f).exists(), "missing {f}");
    }
    let loss = std::fs::read_to_string(d.join("run/loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,step,L_s,L_d,vib_x,vib_y,total"));

    let out = cider(d, &["--config", "tiny.toml", "evaluate", "--checkpoint", "run"]);
    ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["X"]["MRR"]["mean"].as_f64().unwrap() > 0.0);
    assert!(d.join("run/report.csv").exists());

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "evaluate");
    assert!(manifest["version"].as_str().unwrap().starts_with(env!("CARGO_PKG_VERSION")));
}

#[test]
fn evaluation_is_repeatable() {
    let dir = setup();
    let d = dir.path();
    ok(&cider(d, &["--config", "tiny.toml", "--out", "run", "--seed", "3", "train"]));
    let a = cider(d, &["evaluate", "--checkpoint", "run"]);
    let b = cider(d, &["evaluate", "--checkpoint", "run"]);
    ok(&a);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn grid_writes_one_row_per_point() {
    let dir = setup();
    let d = dir.path();
    ok(&cider(d, &["--config", "tiny.toml", "--out", "g", "--param", "alpha=1,3", "--param", "T=2,3", "grid"]));
    let csv = std::fs::read_to_string(d.join("g/grid/grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
}

#[test]
fn overlap_sweep_has_a_ratio_column() {
    let dir = setup();
    let d = dir.path();
    ok(&cider(d, &["--config", "tiny.toml", "--out", "o", "overlap-sweep", "--ratios", "0,50%"]));
    let csv = std::fs::read_to_string(d.join("o/overlap/overlap.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("ratio"));
    assert!(csv.lines().skip(1).any(|l| l.starts_with("0.5,") || l.contains(",0.5,")));
}

#[test]
fn make_synthetic_honours_the_environment() {
    let dir = setup();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_cider"))
        .current_dir(d)
        .env("CIDER_OUT", "envout")
        .args(["--config", "tiny.toml", "make-synthetic"])
        .output()
        .unwrap();
    ok(&out);
    let x = std::fs::read_to_string(d.join("envout/x.csv")).unwrap();
    assert!(x.starts_with("user_id,item_id,timestamp"));
    assert_eq!(x.lines().count(), 1 + 60 * 6);
}

#[test]
fn csv_input_round_trips_through_training() {
    let dir = setup();
    let d = dir.path();
    ok(&cider(d, &["--config", "tiny.toml", "--out", "data", "make-synthetic"]));
    let body = TINY.split("[encoder]").nth(1).unwrap();
    let cfg = format!("[data]\nx = \"data/x.csv\"\ny = \"data/y.csv\"\n\n[encoder]{body}");
    std::fs::write(d.join("csv.toml"), cfg).unwrap();
    ok(&cider(d, &["--config", "csv.toml", "--out", "run", "train"]));
    assert!(d.join("run/encoder.ckpt").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = setup();
    let out = cider(dir.path(), &["--ratio", "abc", "train"]);
    assert_eq!(out.status.code(), Some(2));
    let out = cider(dir.path(), &["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "[train]\nlr = -1.0\n").unwrap();
    let out = cider(d, &["--config", "bad.toml", "train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning rate"));

    let out = cider(d, &["evaluate", "--checkpoint", "missing"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn several_values_are_only_for_grid() {
    let dir = setup();
    let out = cider(dir.path(), &["--config", "tiny.toml", "--param", "alpha=1,2", "train"]);
    assert_ne!(out.status.code(), Some(0));
}
