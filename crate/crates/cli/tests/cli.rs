use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
seed = 4
train_size = 40
dev_size = 10
test_size = 10
hidden_dim = 16
embed_dim = 8
attn_dim = 8
dc_hidden = 8
k = 4
d_v = 8
xe_epochs = 1
mse_epochs = 1
batch_size = 8
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_captionedit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn pipeline(dir: &Path) -> (String, String, Vec<u8>) {
    std::fs::write(dir.join("small.cfg"), SMALL).unwrap();
    let base = ["--config", "small.cfg"];
    let gen = run(dir, &[&base[..], &["gen"]].concat());
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    let train = run(dir, &[&base[..], &["train"]].concat());
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let eval = run(dir, &[&base[..], &["eval"]].concat());
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let edit = run(dir, &[&base[..], &["edit", "a dog on a a mat", "--feature-seed", "3"]].concat());
    assert!(edit.status.success(), "{}", String::from_utf8_lossy(&edit.stderr));
    let ckpt = std::fs::read(dir.join("run/model.ckpt")).unwrap();
    let report = std::fs::read_to_string(dir.join("run/eval_test.json")).unwrap();
    (report, stdout(&edit), ckpt)
}

#[test]
fn pipeline_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pipeline(a.path());
    let rb = pipeline(b.path());
    assert_eq!(
        std::fs::read(a.path().join("data/train.jsonl")).unwrap(),
        std::fs::read(b.path().join("data/train.jsonl")).unwrap()
    );
    assert_eq!(ra, rb);
    assert!(ra.0.contains("cider_d"));
    assert!(ra.1.contains("edited\t"));
}

#[test]
fn eval_rejects_mismatched_config() {
    let d = tempfile::tempdir().unwrap();
    pipeline(d.path());
    std::fs::write(d.path().join("other.cfg"), SMALL.replace("hidden_dim = 16", "hidden_dim = 12")).unwrap();
    let o = run(d.path(), &["--config", "other.cfg", "eval"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not match"));
}

#[test]
fn unknown_config_key_is_an_error() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.cfg"), "hiden_dim = 3\n").unwrap();
    let o = run(d.path(), &["--config", "bad.cfg", "gen"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_detects_a_fault() {
    let d = tempfile::tempdir().unwrap();
    let ok = run(d.path(), &["gradcheck"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("checks passed"));
    let bad = run(d.path(), &["gradcheck", "--inject-fault", "tanh"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("FAILED"));
}

#[test]
fn eval_without_corpus_explains() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["stats"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("captionedit gen"));
}
