use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mgcot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgcot"))
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mgcot(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    mgcot(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: [&str; 12] = [
    "--dataset", "synthetic", "--d", "8", "--epochs", "1", "--batch-size", "64", "--set", "k_sp=5", "--top-k", "2",
];

fn tiny_corpus(dir: &Path) {
    ok(&["synth", "--out", p(dir), "--items", "30", "--sessions", "300", "--synth-seed", "3"]);
}

fn train_args<'a>(corpus: &'a Path, out: &'a Path, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["train", "--corpus", p(corpus), "--out", p(out)];
    v.extend(TINY);
    v.extend(extra);
    v
}

#[test]
fn synth_prints_stats_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let stdout = ok(&["synth", "--out", p(&a), "--items", "30", "--sessions", "300"]);
    assert!(stdout.contains("#train") && stdout.contains("avg.len"));
    assert_eq!(code(&["synth", "--out", p(&a), "--items", "30", "--sessions", "300"]), 3);
    let before = fs::read(a.join("train.txt")).unwrap();
    ok(&["synth", "--out", p(&a), "--items", "30", "--sessions", "300", "--force"]);
    assert_eq!(fs::read(a.join("train.txt")).unwrap(), before);

    let b = tmp.path().join("b");
    ok(&["preprocess", "--synthetic", "--out", p(&b), "--items", "30", "--sessions", "300"]);
    assert_eq!(fs::read(b.join("train.txt")).unwrap(), before);
}

#[test]
fn preprocess_reads_a_log() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("log.csv");
    let mut text = String::new();
    for s in 0..40 {
        for t in 0..3 {
            text.push_str(&format!("s{s},i{},{}\n", (s + t) % 4, s * 10 + t));
        }
    }
    fs::write(&log, text).unwrap();
    let out = tmp.path().join("corpus");
    let stdout = ok(&["preprocess", "--input", p(&log), "--out", p(&out), "--test-fraction", "0.25"]);
    assert!(stdout.contains("log"));
    let stats = fs::read_to_string(out.join("stats.txt")).unwrap();
    assert!(stats.contains("train_sessions = 30"), "{stats}");
    assert!(stats.contains("items = 4"));
}

#[test]
fn missing_input_is_an_io_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mgcot(&["preprocess", "--input", "/no/such/file.csv", "--out", p(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    assert_eq!(code(&["train", "--corpus", "/no/such/corpus", "--out", p(&tmp.path().join("r"))]), 3);
}

#[test]
fn flag_errors_are_config_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    tiny_corpus(&corpus);
    let run = tmp.path().join("run");
    assert_eq!(code(&["train", "--bogus-flag"]), 2);
    assert_eq!(code(&train_args(&corpus, &run, &["--ablate", "no-contrastive", "--beta", "5"])), 2);
    assert_eq!(code(&train_args(&corpus, &run, &["--set", "epochs=3"])), 2);
    assert_eq!(code(&train_args(&corpus, &run, &["--set", "no_such_key=1"])), 2);
    assert_eq!(code(&train_args(&corpus, &run, &["--ablate", "no-such-variant"])), 2);
    let cfg = tmp.path().join("cfg.toml");
    fs::write(&cfg, "dataset = \"tmall\"\n").unwrap();
    let mut args = vec!["train", "--corpus", p(&corpus), "--out", p(&run), "--config", p(&cfg)];
    args.extend(["--dataset", "diginetica"]);
    assert_eq!(code(&args), 2);
    assert!(!run.join("last.ckpt").exists());
}

#[test]
fn dataset_defaults_land_in_the_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    tiny_corpus(&corpus);
    let run = tmp.path().join("run");
    let args = [
        "train", "--corpus", p(&corpus), "--out", p(&run), "--dataset", "tmall", "--d", "8", "--epochs", "1",
        "--batch-size", "64", "--set", "k_sp=5",
    ];
    ok(&args);
    let snap: toml::Table = fs::read_to_string(run.join("config.toml")).unwrap().parse().unwrap();
    assert_eq!(snap["top_k"].as_integer(), Some(6));
    assert_eq!(snap["beta"].as_float(), Some(0.05));
    assert_eq!(snap["heads"].as_integer(), Some(2));
}

#[test]
fn train_evaluate_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    tiny_corpus(&corpus);
    let run = tmp.path().join("run");
    ok(&train_args(&corpus, &run, &[]));
    for f in ["config.toml", "runlog.jsonl", "last.ckpt", "best.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(code(&train_args(&corpus, &run, &[])), 3);

    let stdout = ok(&[
        "evaluate", "--run", p(&run), "--corpus", p(&corpus), "--baselines", "--export-attention",
        "--attention-limit", "10",
    ]);
    assert!(stdout.contains("MGCOT") && stdout.contains("POP") && stdout.contains("MARKOV"));
    let eval = run.join("eval");
    let metrics = fs::read_to_string(eval.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["p10", "p20", "m10", "m20"] {
        assert!(first["overall"][key].as_f64().unwrap().is_finite());
    }
    let attention = fs::read_to_string(eval.join("attention.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(attention.lines().next().unwrap()).unwrap();
    let row_sum: f64 = rec["weights"][0].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((row_sum - 1.0).abs() < 1e-6);
    assert_eq!(attention.lines().count(), 10 * 2);

    let table = tmp.path().join("table.txt");
    let stdout = ok(&["report", p(&run), "--out", p(&table)]);
    assert_eq!(fs::read_to_string(&table).unwrap(), stdout);
    assert_eq!(code(&["report", p(&tmp.path().join("nothing"))]), 3);
}

#[test]
fn resume_continues_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    tiny_corpus(&corpus);
    let run = tmp.path().join("run");
    ok(&train_args(&corpus, &run, &[]));
    ok(&["train", "--corpus", p(&corpus), "--out", p(&run), "--resume", "--epochs", "2"]);
    let log = fs::read_to_string(run.join("runlog.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"record\":\"epoch\"")).count(), 2);
    let mut ckpt = fs::read(run.join("last.ckpt")).unwrap();
    let n = ckpt.len();
    ckpt[n / 2] ^= 1;
    fs::write(run.join("last.ckpt"), ckpt).unwrap();
    let out = mgcot(&["train", "--corpus", p(&corpus), "--out", p(&run), "--resume", "--epochs", "3"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("integrity"));
}

#[test]
fn ablation_tag_and_beta() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    tiny_corpus(&corpus);
    let run = tmp.path().join("run");
    ok(&train_args(&corpus, &run, &["--ablate", "no-contrastive"]));
    let log = fs::read_to_string(run.join("runlog.jsonl")).unwrap();
    assert!(log.lines().next().unwrap().contains("\"ablation\":\"no-contrastive\""));
    let epoch: serde_json::Value = serde_json::from_str(log.lines().nth(1).unwrap()).unwrap();
    assert_eq!(epoch["loss_contrastive"].as_f64(), Some(0.0));
}

#[test]
fn build_graphs_writes_a_graph() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    tiny_corpus(&corpus);
    let out = tmp.path().join("g").join("global.txt");
    let stdout = ok(&["build-graphs", "--corpus", p(&corpus), "--out", p(&out), "--k-sp", "5"]);
    assert!(stdout.contains("31 nodes"));
    let graph = mgcot::graphs::GlobalItemGraph::load(&out).unwrap();
    assert_eq!(graph.num_nodes(), 31);
    assert_eq!(code(&["build-graphs", "--corpus", p(&corpus), "--out", p(&out)]), 3);
}
