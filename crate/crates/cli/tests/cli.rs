use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 8] = [
    "--set",
    "data.synthetic.n_items=200",
    "--set",
    "data.synthetic.n_users=300",
    "--set",
    "data.synthetic.n_clusters=8",
    "--set",
    "model.d=8",
];

fn odmt(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odmt"))
        .args(args)
        .env("ODMT_OUT", out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("run.json")).unwrap()).unwrap()
}

#[test]
fn gen_is_byte_identical_for_the_same_seed() {
    let tmp = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let o = odmt(tmp.path(), &[&["gen", "--name", name][..], &SMALL].concat());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["manifest.json", "visual.f64", "textual.f64", "interactions.csv"] {
        let a = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    let m = manifest(&tmp.path().join("a"));
    assert_eq!(m["command"], "gen");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 4);
}

#[test]
fn default_gen_writes_a_2000_item_catalog() {
    let tmp = tempfile::tempdir().unwrap();
    let o = odmt(tmp.path(), &["gen"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["n_items"], 2000);
}

#[test]
fn unknown_keys_and_values_are_named() {
    let tmp = tempfile::tempdir().unwrap();
    let o = odmt(tmp.path(), &["train", "--set", "model.widht=3"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("widht") && err.contains("fst_layers"), "{err}");

    let o = odmt(tmp.path(), &["train", "--set", "model.fusion=middle"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("middle") && err.contains("collaborative"), "{err}");

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = odmt(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("learning_rate"));
}

#[test]
fn dry_run_prints_the_plan_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let o = odmt(
        tmp.path(),
        &["sweep", "--dry-run", "--set", "distill.T=0.5", "--set", "distill.alpha=50"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.trim_start().starts_with("T=")).count(), 36);
    assert!(out.contains("T = 0.5") && out.contains("alpha = 50.0"), "{out}");
    assert!(std::fs::read_dir(tmp.path()).unwrap().next().is_none());

    let o = odmt(tmp.path(), &["ablate", "--dry-run"]);
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("  ")).count(), 9);
}

#[test]
fn train_then_eval_from_a_generated_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let o = odmt(tmp.path(), &[&["gen"][..], &SMALL].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let data = tmp.path().join("data");
    let dir_key = format!("data.dir=\"{}\"", data.display());
    let args = [
        &["train", "--set", &dir_key, "--set", "train.epochs=2"][..],
        &SMALL,
    ]
    .concat();
    let o = odmt(tmp.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("train");
    let m = manifest(&run);
    assert_eq!(m["seed"], 7);
    assert!(m["overrides"].as_array().unwrap().iter().any(|v| v == "train.epochs=2"));
    assert!(m["config"].as_str().unwrap().contains("epochs = 2"));
    for f in m["outputs"].as_array().unwrap() {
        assert!(Path::new(f.as_str().unwrap()).exists());
    }

    let o = odmt(tmp.path(), &["eval", "--run", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = std::fs::read(run.join("metrics.json")).unwrap();
    let b = std::fs::read(tmp.path().join("eval/metrics.json")).unwrap();
    assert!(a == b, "evaluation of the checkpoint differs from the training run");
}

#[test]
fn shipped_configs_validate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let o = odmt(tmp.path(), &["train", "--dry-run", "--config", path.to_str().unwrap()]);
        assert!(o.status.success(), "{}: {}", path.display(), stderr(&o));
    }
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 0);
}
