use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kpmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kpmix")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn dataset(dir: &Path, name: &str, scenes: usize, seed: u64) -> String {
    let cfg = write(dir, &format!("{name}.cfg"), &format!("num_scenes = {scenes}\nseed = {seed}\n"));
    let out = dir.join(name).to_str().unwrap().to_string();
    let o = kpmix(&["generate-data", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

const TINY: &str = "iterations = 3\nbatch_size = 2\nbackbone_width = 4\nhead_layers = 2\nhead_width = 4\n";

#[test]
fn generate_train_eval_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "train.jsonl", 6, 1);
    let held = dataset(dir.path(), "eval.jsonl", 3, 2);
    assert!(Path::new(&format!("{data}.config")).exists());

    let cfg = write(
        dir.path(),
        "train.cfg",
        &format!("{TINY}dataset = {data}\neval_dataset = {held}\neval_interval = 2\n"),
    );
    let run = dir.path().join("run");
    let o = kpmix(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(run.join("config.txt").exists());
    assert!(run.join("evals.csv").exists());

    let ckpt = run.join("model.ckpt");
    let metrics = dir.path().join("metrics.csv");
    let o = kpmix(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        &held,
        "--out",
        metrics.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&metrics).unwrap();
    assert!(csv.starts_with("metric,value\nAP,"));
    assert!(csv.contains("\nAP50,") && csv.contains("\nduplicate_rate,"));
    assert!(metrics.with_extension("curves.csv").exists());
    assert!(stdout(&o).starts_with("ap="));

    for precision in ["single", "double"] {
        let o = kpmix(&[
            "diagnose-underflow",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--precision",
            precision,
            "--data",
            &held,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let text = stdout(&o);
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows[0], "K_g,kind,precision,ratio");
        // divisors of 6
        assert_eq!(rows.len(), 5);
        // An untrained wide-scale model never underflows at K_g = 1.
        assert!(rows[1].ends_with(",0"), "{}", rows[1]);
    }
}

#[test]
fn sweep_prints_one_row_per_group_size() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "d.jsonl", 4, 3);
    let cfg = write(dir.path(), "s.cfg", &format!("{TINY}dataset = {data}\n"));
    let o = kpmix(&["sweep-kg", "--config", &cfg, "--kg", "1,2,3,6"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "k_g,ap,ap50,mean_underflow_ratio");
    let kgs: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(kgs, ["1", "2", "3", "6"]);

    let o = kpmix(&["sweep-kg", "--config", &cfg, "--kg", "4"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let o = kpmix(&["gradcheck", "--probes", "16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let row = text.lines().nth(1).unwrap();
    assert!(row.starts_with("pipeline,16,"), "{row}");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let o = kpmix(&["train", "--config", missing.to_str().unwrap(), "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));

    let bad = write(dir.path(), "bad.cfg", "iterations = 3\nnot_a_key = 1\n");
    let o = kpmix(&["train", "--config", &bad, "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not_a_key"));

    let no_data = write(dir.path(), "nodata.cfg", TINY);
    let o = kpmix(&["train", "--config", &no_data, "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn non_finite_loss_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "d.jsonl", 4, 5);
    // A huge step drives the predictions far off; single-precision linear
    // densities over all keypoints then vanish.
    let cfg = write(
        dir.path(),
        "nan.cfg",
        &format!("{TINY}iterations = 20\nlr = 1000\nk_g = 6\nlikelihood_space = linear_single\ndataset = {data}\n")
            .replacen("iterations = 3\n", "", 1),
    );
    let run = dir.path().join("run");
    let o = kpmix(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(run.join("abort.txt")).unwrap().contains("iteration"));
    assert!(run.join("log.csv").exists());
}
