use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use matchsrnn::io;
use matchsrnn::lcs;

fn matchsrnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matchsrnn")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

const TINY_DATA: [&str; 6] = ["--set", "n_train=120", "--set", "n_test=30", "--set", "n_valid=30"];
const TINY: [&str; 10] = ["--set", "n_train=120", "--set", "n_test=30", "--set", "n_valid=30", "--dims", "4,3,3", "--set", "batch_size=8"];

/// Small LCS dataset plus a two-epoch checkpoint trained on it.
fn tiny_model(dir: &Path) -> (String, String) {
    let data = dir.join("data");
    let o = matchsrnn(&[&["gen-data", "--seed", "3", "--out-dir", &p(&data)][..], &TINY].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = dir.join("run");
    let o = matchsrnn(
        &[&["train", "--seed", "3", "--set", "max_epochs=2", "--train", &p(&data.join("train.jsonl")), "--out-dir", &p(&run)][..], &TINY].concat(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (p(&data), p(&run.join("model.ckpt")))
}

#[test]
fn unknown_config_key_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = matchsrnn(&["gradcheck", "--set", "nonsense=1", "--out-dir", &p(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nonsense"));
}

#[test]
fn corrupted_gradient_fails_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = matchsrnn(&["gradcheck", "--instances", "3", "--out-dir", &p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = matchsrnn(&["gradcheck", "--instances", "3", "--corrupt-grad", "--out-dir", &p(dir.path())]);
    assert_eq!(code(&o), 2);
    let table = fs::read_to_string(dir.path().join("gradcheck.txt")).unwrap();
    assert!(table.contains("FAIL") && table.contains("score_b"));
}

#[test]
fn manifest_records_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = matchsrnn(&["gradcheck", "--instances", "2", "--seed", "77", "--out-dir", &p(dir.path())]);
    assert_eq!(code(&o), 0);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "gradcheck");
    assert_eq!(m["seed"], 77);
    assert_eq!(m["status"], "ok");
    assert!(m["wall_seconds"].as_f64().unwrap() >= 0.0);
    assert!(m["config_text"].as_str().unwrap().contains("seed = 77"));
    assert!(m["argv"].as_array().unwrap().iter().any(|a| a == "--instances"));
    assert!(m["outputs"].as_array().unwrap().iter().any(|a| a.as_str().unwrap().ends_with("gradcheck.txt")));
}

#[test]
fn manifest_records_failures_too() {
    let dir = tempfile::tempdir().unwrap();
    let o = matchsrnn(&["eval", "--data", "/nonexistent/data.jsonl", "--random", "--out-dir", &p(dir.path())]);
    assert_eq!(code(&o), 1);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert!(m["status"].as_str().unwrap().starts_with("error (exit 1)"));
}

#[test]
fn ranking_data_with_square_loss_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("rank");
    let o = matchsrnn(&["gen-data", "--task", "ranking", "--set", "rank_queries=10", "--set", "rank_test_queries=5", "--out-dir", &p(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = matchsrnn(&["train", "--loss", "square", "--train", &p(&data.join("train.jsonl")), "--out-dir", &p(&dir.path().join("t"))]);
    assert_eq!(code(&o), 1);
    assert!(!dir.path().join("t/model.ckpt").exists());
}

#[test]
fn simulate_lcs_requires_square_loss() {
    let dir = tempfile::tempdir().unwrap();
    let o = matchsrnn(&["simulate-lcs", "--loss", "hinge", "--out-dir", &p(dir.path())]);
    assert_eq!(code(&o), 1);
}

#[test]
fn exact_mode_heatmap_is_the_dp_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = matchsrnn(&["visualize", "ABCBDAB", "BDCABA", "--exact-mode", "--out-dir", &p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let grid = io::parse_csv_grid(&fs::read_to_string(dir.path().join("heatmap.csv")).unwrap()).unwrap();
    let (x, y) = (lcs::letters("ABCBDAB", 26).unwrap(), lcs::letters("BDCABA", 26).unwrap());
    let table = lcs::lcs_table(&x, &y);
    assert_eq!(grid.len(), 8);
    for (i, row) in grid.iter().enumerate() {
        assert_eq!(row.len(), 7);
        for (j, v) in row.iter().enumerate() {
            assert_eq!(*v, table.get(i, j) as f64);
        }
    }
    assert_eq!(table.length(), 4);
    let path = fs::read_to_string(dir.path().join("path.csv")).unwrap();
    assert!(path.starts_with("step,i,j,move\n0,7,6,"));
    let pgm = fs::read_to_string(dir.path().join("heatmap.pgm")).unwrap();
    assert!(pgm.starts_with("P2\n7 8\n255\n"));
}

#[test]
fn exact_simulation_reports_full_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let o = matchsrnn(&["simulate-lcs", "--exact-mode", "--set", "n_train=1", "--set", "n_test=100", "--out-dir", &p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["exact"]["grid_matches"], 100);
    assert_eq!(m["exact"]["diagonal_matches"], 100);
    assert_eq!(m["path_agreement"], 1.0);
    assert_eq!(m["example"]["predicted_lcs"], 3);
    assert!(dir.path().join("example/dp_table.csv").exists());
}

#[test]
fn visualize_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = tiny_model(dir.path());
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("viz{k}"));
        let o = matchsrnn(&["visualize", "ABCDE", "FACGD", "--checkpoint", &ckpt, "--out-dir", &p(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        outputs.push(["heatmap.csv", "heatmap.pgm", "gates.csv", "path.csv"].map(|f| fs::read(out.join(f)).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let o = matchsrnn(&["visualize", "ABCDE", "FAXGD", "--checkpoint", &ckpt, "--out-dir", &p(&dir.path().join("bad"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn resume_replays_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (data, half) = tiny_model(dir.path());
    let train = format!("{data}/train.jsonl");
    let full = dir.path().join("full");
    let resumed = dir.path().join("resumed");
    let common = [&["train", "--seed", "3", "--set", "max_epochs=4", "--train", &train][..], &TINY].concat();
    let o = matchsrnn(&[&common[..], &["--out-dir", &p(&full)]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = matchsrnn(&[&common[..], &["--resume", &half, "--out-dir", &p(&resumed)]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(full.join("model.ckpt")).unwrap(), fs::read(resumed.join("model.ckpt")).unwrap());
    assert_eq!(history_without_wall(&full), history_without_wall(&resumed));

    // a resumed run must use the same optimizer settings
    let o = matchsrnn(&[&common[..], &["--set", "lr=0.2", "--resume", &half, "--out-dir", &p(&dir.path().join("x"))]].concat());
    assert_eq!(code(&o), 1);
}

/// history.csv minus its wall-clock column.
fn history_without_wall(dir: &Path) -> Vec<String> {
    let text = fs::read_to_string(dir.join("history.csv")).unwrap();
    text.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

#[test]
fn eval_checks_dims_and_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = tiny_model(dir.path());
    let test = format!("{data}/test.jsonl");
    let out = dir.path().join("eval");
    let o = matchsrnn(&["eval", "--data", &test, "--checkpoint", &ckpt, "--out-dir", &p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.contains("MSE") && csv.contains("Pearson"));
    let o = matchsrnn(&["eval", "--data", &test, "--checkpoint", &ckpt, "--dims", "5,3,3", "--out-dir", &p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--dims"));
}

#[test]
fn random_classifier_reports_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cls");
    let o = matchsrnn(&["gen-data", "--task", "classification", "--set", "class_pairs=20", "--set", "class_test_pairs=200", "--out-dir", &p(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = dir.path().join("eval");
    let o = matchsrnn(&["eval", "--data", &p(&data.join("test.jsonl")), "--random", "--dims", "4,3,3", "--out-dir", &p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(fs::read_to_string(out.join("metrics.csv")).unwrap().contains("Acc"));
}

#[test]
fn pretrained_embeddings_must_match_embed_dim() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = matchsrnn(&[&["gen-data", "--out-dir", &p(&data)][..], &TINY_DATA].concat());
    assert_eq!(code(&o), 0);
    let emb = dir.path().join("vec.txt");
    fs::write(&emb, "A 0.1 0.2 0.3 0.4\nB 0.5 0.6 0.7 0.8\nZZ 1 1 1 1\n").unwrap();
    let train = p(&data.join("train.jsonl"));
    let run = |dims: &str, out: &str| {
        matchsrnn(&[&["train", "--set", "max_epochs=1", "--train", &train, "--embeddings", &p(&emb), "--out-dir", &p(&dir.path().join(out))][..], &TINY_DATA, &["--dims", dims]].concat())
    };
    let o = run("4,3,3", "ok");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("no pre-trained vector"));
    let o = run("5,3,3", "bad");
    assert_eq!(code(&o), 1);
}
