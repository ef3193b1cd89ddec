use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use movierec::synth::{write_movielens, SynthSpec};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_movierec")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value<'a>(out: &'a str, key: &str) -> &'a str {
    out.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key}= in {out}"))
}

fn data(root: &Path) -> PathBuf {
    let dir = root.join("ml");
    fs::create_dir_all(&dir).unwrap();
    write_movielens(&dir, SynthSpec { users: 60, movies: 40, ratings: 1500, seed: 9 }).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn prepare_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = data(tmp.path());
    let (a, b) = (tmp.path().join("a.json"), tmp.path().join("b.json"));
    for out in [&a, &b] {
        let o = run(&["prepare", "--data-dir", s(&dir), "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(value(&stdout(&o), "users"), "60");
        assert_eq!(value(&stdout(&o), "ratings"), "1500");
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(&a).unwrap()).unwrap();
    assert!(meta.is_object());
}

#[test]
fn missing_ratings_file_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = data(tmp.path());
    fs::remove_file(dir.join("ratings.dat")).unwrap();
    let o = run(&["prepare", "--data-dir", s(&dir), "--out", s(&tmp.path().join("m.json"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ratings.dat"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["recommend", "--model", "x", "--user-id", "1", "--top-k", "0"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn zero_epochs_logs_one_test_row() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = data(tmp.path());
    let (model, csv) = (tmp.path().join("m.bin"), tmp.path().join("m.csv"));
    let o = run(&[
        "train", "--data-dir", s(&dir), "--out-model", s(&model), "--metrics", s(&csv), "--epochs", "0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,step,split,loss,rmse");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("0,0,test,"), "{}", lines[1]);
    assert_eq!(value(&stdout(&o), "steps"), "0");
}

#[test]
fn train_evaluate_recommend() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = data(tmp.path());
    let (model, csv) = (tmp.path().join("m.bin"), tmp.path().join("m.csv"));
    let o = run(&[
        "train", "--data-dir", s(&dir), "--out-model", s(&model), "--metrics", s(&csv),
        "--title-encoder", "attn-cnn", "--subsample", "1000", "--epochs", "2", "--batch-size", "64",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let train_out = stdout(&o);
    assert_eq!(value(&train_out, "train_ratings"), "800");
    assert_eq!(value(&train_out, "test_ratings"), "200");

    let o = run(&["evaluate", "--model", s(&model)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(value(&stdout(&o), "records"), "200");
    assert_eq!(value(&stdout(&o), "mse"), value(&train_out, "test_mse"));

    let o = run(&["recommend", "--model", s(&model), "--user-id", "1", "--top-k", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 1, "{out}");
    let fields: Vec<&str> = lines[0].splitn(4, ' ').collect();
    assert_eq!(fields[0], "1");
    fields[1].parse::<u32>().unwrap();
    fields[2].parse::<f64>().unwrap();
    assert!(!fields[3].is_empty());

    let o = run(&["recommend", "--model", s(&model), "--user-id", "999999"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.bin");
    fs::write(&bad, b"not a model at all").unwrap();
    let o = run(&["evaluate", "--model", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!stderr(&o).is_empty());
    let o = run(&["evaluate", "--model", s(&tmp.path().join("absent.bin"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn check_passes_and_catches_an_injected_fault() {
    let o = run(&["check", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(value(&stdout(&o), "failed"), "0");

    let o = run(&["check", "--suite", "gradcheck", "--seed", "3", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(3));
    assert_ne!(value(&stdout(&o), "failed"), "0");
}
