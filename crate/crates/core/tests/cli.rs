use std::path::Path;
use std::process::{Command, Output};

use dple_core::format::{load_dataset, load_model};

const SMALL: &str = "\
m = 12
d_model = 16
d_joint = 8
n_ctx = 2
n_p = 2
d_domain = 12
shots = 4
epochs = 2
k = 3
";

fn dple(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dple"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn gen(dir: &Path, name: &str, seed: &str) -> String {
    let out = path(dir, name);
    let o = dple(&[
        "gen-data", "--classes", "6", "--per-class", "10", "--dim", "12", "--seed", seed, "--out", &out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.dple", "3");
    let b = gen(dir.path(), "b.dple", "3");
    let c = gen(dir.path(), "c.dple", "4");
    let (a, b, c) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), std::fs::read(c).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
    let ds = load_dataset(&dir.path().join("a.dple")).unwrap();
    assert_eq!(ds.records.len(), 60);
    assert_eq!((ds.base.len(), ds.novel.len()), (3, 3));
    assert_eq!(ds.d_domain(), 12);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "x.dple");
    assert_eq!(dple(&["gen-data", "--classes", "1", "--out", &out]).status.code(), Some(2));
    assert_eq!(dple(&["bogus"]).status.code(), Some(2));

    let missing = path(dir.path(), "missing.dple");
    let model = path(dir.path(), "m.dple");
    assert_eq!(dple(&["train", "--data", &missing, "--out", &model]).status.code(), Some(2));

    let data = gen(dir.path(), "d.dple", "1");
    let cfg = path(dir.path(), "bad.cfg");
    std::fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let o = dple(&["train", "--config", &cfg, "--data", &data, "--out", &model]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let o = dple(&["train", "--data", &data, "--out", &model, "--set", "k=99"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_corruption_fails() {
    let o = dple(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for group in ["T_c", "P_l", "Q_t", "Q_v", "projector"] {
        assert!(text.contains(group), "missing group {group} in\n{text}");
    }
    assert!(text.contains("PASS"));

    let o = dple(&["gradcheck", "--corrupt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("worst"));
}

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.dple", "1");
    let other = gen(dir.path(), "o.dple", "5");
    let cfg = path(dir.path(), "small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let model = path(dir.path(), "model.dple");

    let o = dple(&["train", "--config", &cfg, "--data", &data, "--out", &model]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("epoch"));

    let (config, state) = load_model(Path::new(&model)).unwrap();
    assert_eq!(config.dims.d_model, 16);
    assert_eq!(config.train.k, 3);
    assert_eq!(state.depth(), 3);

    let run_again = path(dir.path(), "model2.dple");
    let o = dple(&["train", "--config", &cfg, "--data", &data, "--out", &run_again]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&run_again).unwrap());

    let o = dple(&["eval", "--model", &model, "--data", &data]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("HM"), "{text}");

    let o = dple(&["eval", "--model", &model, "--data", &data, "--protocol", "cross", "--target", &other]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = dple(&["eval", "--model", &model, "--data", &data, "--protocol", "domain-gen"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("v2"));
}

#[test]
fn ablation_grid_from_cli() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.dple", "2");
    let cfg = path(dir.path(), "small.cfg");
    std::fs::write(&cfg, SMALL.replace("epochs = 2", "epochs = 1")).unwrap();
    let model = path(dir.path(), "model.dple");
    let o = dple(&["train", "--config", &cfg, "--data", &data, "--out", &model]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let jsonl = path(dir.path(), "grid.jsonl");
    let o = dple(&["eval", "--model", &model, "--data", &data, "--protocol", "ablate", "--jsonl", &jsonl]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&jsonl)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 12);
    for l in &lines {
        for key in ["axis", "value", "config_hash", "acc_base", "acc_novel", "hm", "final_loss", "probe_loss"] {
            assert!(l.get(key).is_some(), "missing {key} in {l}");
        }
    }
}
