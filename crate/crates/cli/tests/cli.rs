use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cmtf_core::data::load_tensor;
use cmtf_core::model_io::load_model;

fn cmtf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmtf")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_small(dir: &Path, seed: &str) -> Output {
    cmtf(&["gen", "--dims", "20,20,20", "--nnz", "1500", "--seed", seed, "--out", p(dir)])
}

#[test]
fn gen_writes_exact_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmtf(&["gen", "--dims", "100,100,100", "--nnz", "10000", "--seed", "1", "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t = load_tensor(dir.path().join("tensor.tns")).unwrap();
    assert_eq!(t.nnz(), 10_000);
    assert_eq!(t.dims(), &[100, 100, 100]);
    let m = fs::read_to_string(dir.path().join("matrix.mat")).unwrap();
    // Header plus one line per entry.
    assert_eq!(m.lines().count(), 1 + 1000);
    assert!(dir.path().join("truth.txt").exists());
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn gen_is_deterministic_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    assert!(gen_small(a.path(), "5").status.success());
    assert!(gen_small(b.path(), "5").status.success());
    assert!(gen_small(c.path(), "6").status.success());
    for f in ["tensor.tns", "matrix.mat", "truth.txt"] {
        let x = fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, fs::read(b.path().join(f)).unwrap(), "{f}");
        assert_ne!(x, fs::read(c.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_writes_outputs_and_manifest_rerun_matches() {
    let data = tempfile::tempdir().unwrap();
    assert!(gen_small(data.path(), "2").status.success());
    let out = data.path().join("run");
    let tensor = data.path().join("tensor.tns");
    let couple = format!("1:{}:10.0", p(&data.path().join("matrix.mat")));
    let o = cmtf(&[
        "train", "--tensor", p(&tensor), "--rank", "2,2,2", "--epochs", "5", "--seed", "7", "--couple", &couple,
        "--split", "0.2", "--out", p(&out), "--quiet",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("test_rmse="));
    let log = fs::read_to_string(out.join("log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("epoch,train_rmse,objective,seconds"));
    assert_eq!(lines.count(), 5);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["inputs"]["couple"][0]["mode"], 1);
    assert_eq!(manifest["inputs"]["couple"][0]["lambda"], 10.0);
    assert_eq!(load_model(out.join("model.txt")).unwrap().couplings.len(), 1);
    assert_eq!(load_tensor(out.join("test.tns")).unwrap().nnz(), 300);

    let again = data.path().join("rerun");
    let o = cmtf(&["train", "--manifest", p(&out.join("manifest.json")), "--out", p(&again), "-q"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(out.join("model.txt")).unwrap(), fs::read(again.join("model.txt")).unwrap());
    assert_eq!(fs::read(out.join("test.tns")).unwrap(), fs::read(again.join("test.tns")).unwrap());
    // Same trajectory; only the timing column may differ.
    let cols = |path: &Path| -> Vec<String> {
        fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(cols(&out.join("log.csv")), cols(&again.join("log.csv")));
}

#[test]
fn couple_flag_attaches_matrix_to_mode() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("t.tns"), "3 4 2\n1 1 1 1.0\n2 3 2 0.5\n3 4 1 -1.0\n").unwrap();
    fs::write(dir.path().join("y.mat"), "4 3\n1 2 1.0\n4 3 0.5\n").unwrap();
    let couple = format!("2:{}:10.0", p(&dir.path().join("y.mat")));
    let o = cmtf(&[
        "train", "--tensor", p(&dir.path().join("t.tns")), "--rank", "1,2,1", "--epochs", "2", "--couple", &couple,
        "--out", p(dir.path()), "-q",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = load_model(dir.path().join("model.txt")).unwrap();
    assert_eq!(m.couplings[0].mode, 1);
    assert_eq!(m.couplings[0].v.rows(), 3);

    // A matrix whose row count disagrees with the mode is a shape error.
    let wrong = format!("1:{}:10.0", p(&dir.path().join("y.mat")));
    let o = cmtf(&[
        "train", "--tensor", p(&dir.path().join("t.tns")), "--rank", "1,2,1", "--couple", &wrong, "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn eval_of_perfect_model_is_zero_and_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    assert!(gen_small(dir.path(), "3").status.success());
    let truth = dir.path().join("truth.txt");
    let tensor = dir.path().join("tensor.tns");
    let o = cmtf(&["eval", "--model", p(&truth), "--tensor", p(&tensor)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l == "test_rmse=0"), "{}", stdout(&o));

    let run = dir.path().join("run");
    let o = cmtf(&["train", "--tensor", p(&tensor), "--rank", "2,2,2", "--epochs", "3", "--out", p(&run), "-q"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = cmtf(&["eval", "--model", p(&run.join("model.txt")), "--tensor", p(&tensor), "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let model = load_model(run.join("model.txt")).unwrap();
    let expect = cmtf_core::test_rmse(&model, &load_tensor(&tensor).unwrap()).unwrap();
    assert_eq!(report["test_rmse"].as_f64().unwrap(), expect);
    assert_eq!(report["n_entries"], 1500);
}

#[test]
fn missing_model_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("t.tns"), "1 1 1.0\n").unwrap();
    let missing = dir.path().join("nope.txt");
    let o = cmtf(&["eval", "--model", p(&missing), "--tensor", p(&dir.path().join("t.tns"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.txt"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let o = cmtf(&["train", "--tensor", "x.tns", "--rank", "2,2", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = cmtf(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    let o = cmtf(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("train"));
}

#[test]
fn parse_errors_exit_1_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.tns");
    fs::write(&t, "2 2 2\n0 1 1 2.0\n").unwrap();
    let o = cmtf(&["train", "--tensor", p(&t), "--rank", "1,1,1", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    let o = cmtf(&["train", "--tensor", p(&t), "--rank", "1,x,1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergence_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert!(gen_small(dir.path(), "4").status.success());
    let o = cmtf(&[
        "train", "--tensor", p(&dir.path().join("tensor.tns")), "--rank", "2,2,2", "--eta", "1e200", "--out",
        p(&dir.path().join("run")), "-q",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}

#[test]
fn bench_worker_sweep_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("w.csv");
    let o = cmtf(&[
        "bench", "--sweep", "workers", "--values", "1,2", "--dim", "30", "--nnz", "2000", "--warmup", "0",
        "--min-epochs", "1", "--max-epochs", "1", "--min-seconds", "0", "--out", p(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "param,seconds_per_epoch,speedup");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[1].ends_with(",1"), "{}", lines[1]);
    assert!(dir.path().join("w.manifest.json").exists());

    // Without --out the CSV goes to stdout.
    let o = cmtf(&[
        "bench", "--sweep", "nnz", "--values", "500,1000", "--dim", "30", "--warmup", "0", "--min-epochs", "1",
        "--max-epochs", "1", "--min-seconds", "0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("param,seconds_per_epoch,speedup\n500,"));
}
