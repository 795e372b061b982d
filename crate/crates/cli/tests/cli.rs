use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SYNTHETIC16: &str = "bits = 8\nhidden = 64\nphase1_epochs = 60\nphase2_epochs = 20\nbatch_size = 64\nseed = 7\n";

fn llc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_llc"))
        .args(args)
        .env("LLC_REPORT_DIR", dir)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = llc(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.conf");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn last_json(path: &Path) -> Value {
    let text = fs::read_to_string(path).unwrap();
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

#[test]
fn eval_reproduces_the_training_report() {
    let dir = tempfile::tempdir().unwrap();
    let conf = config(dir.path(), SYNTHETIC16);
    ok(dir.path(), &["gen-data"]);
    ok(dir.path(), &["--config", &conf, "train"]);
    let printed: Value = serde_json::from_str(ok(dir.path(), &["eval"]).trim()).unwrap();
    let report = last_json(&dir.path().join("train_report.jsonl"));
    let eval = last_json(&dir.path().join("eval_report.jsonl"));
    assert_eq!(printed, eval);
    for key in ["ed_accuracy", "mhd_accuracy", "mean_bits_correct", "n"] {
        assert_eq!(eval[key], report["test"][key], "{key}");
    }
    assert_eq!(eval["unique_codes"], 16);
    let dump = fs::read_to_string(dir.path().join("eval_instances.jsonl")).unwrap();
    assert_eq!(dump.lines().count(), 800);
}

#[test]
fn mismatched_codebook_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let small = "bits = 6\nhidden = 8\nphase1_epochs = 2\nphase2_epochs = 1\n";
    ok(dir.path(), &["--set", "samples_per_class=20", "gen-data"]);
    ok(dir.path(), &["--config", &config(dir.path(), small), "train"]);
    let other = dir.path().join("other");
    fs::create_dir(&other).unwrap();
    let dataset = dir.path().join("dataset.csv");
    let args = ["--dataset", dataset.to_str().unwrap(), "--set", "bits=7", "--set", "hidden=8", "--set", "phase1_epochs=1", "--set", "phase2_epochs=0", "train"];
    ok(&other, &args);
    let codebook = other.join("codebook.txt");
    let out = llc(dir.path(), &["eval", "--codebook", codebook.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1);
    assert!(stderr.starts_with("error[data]: dimension mismatch in codebook bits vs checkpoint bits: 7 vs 6"), "{stderr}");
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for (args, needle) in [
        (vec!["--set", "bitz=3", "gen-data"], "unknown key `bitz`"),
        (vec!["--set", "depth=two", "gen-data"], "key `depth`"),
        (vec!["eval"], "missing input file"),
        (vec!["train", "--phase", "3"], "key `phase`"),
        (vec!["--config", "/does/not/exist", "eval"], "cannot read config"),
    ] {
        let out = llc(dir.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let stderr = String::from_utf8(out.stderr).unwrap();
        assert!(stderr.starts_with("error[config]: ") && stderr.contains(needle), "{stderr}");
    }
    let bad = config(dir.path(), "bits = 8\nnot a pair\n");
    let out = llc(dir.path(), &["--config", &bad, "eval"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diverging_training_is_a_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--set", "samples_per_class=20", "gen-data"]);
    let conf = config(dir.path(), "bits = 6\nhidden = 8\nphase1_epochs = 20\nphase1_lr = 1e200\nschedule = constant\n");
    let out = llc(dir.path(), &["--config", &conf, "train"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[numeric]: "));
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--set", "samples_per_class=20", "gen-data"]);
    fs::write(dir.path().join("checkpoint.bin"), b"LLC1junk").unwrap();
    fs::write(dir.path().join("codebook.txt"), "#llc-codebook k=2 L=1\n0\t01\n").unwrap();
    let out = llc(dir.path(), &["eval"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn retrieval_fixture_prints_both_average_precisions() {
    let dir = tempfile::tempdir().unwrap();
    let mut db = String::from("0\t0000\t1\n1\t1000\t0\n2\t0100\t0\n3\t0010\t0\n4\t0001\t0\n");
    for id in 5..14 {
        db.push_str(&format!("{id}\t1111\t1\n"));
    }
    fs::write(dir.path().join("db.txt"), db).unwrap();
    fs::write(dir.path().join("q.txt"), "0\t0000\t1\n").unwrap();
    let db_path = dir.path().join("db.txt");
    let q_path = dir.path().join("q.txt");
    let stdout = ok(
        dir.path(),
        &["retrieve", "--topk", "5", "--database-codes", db_path.to_str().unwrap(), "--query-codes", q_path.to_str().unwrap()],
    );
    let summary: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(summary["map_corrected"], 0.2);
    assert_eq!(summary["map_reported"], 1.0);
    let lines = fs::read_to_string(dir.path().join("retrieval.jsonl")).unwrap();
    assert_eq!(
        lines.lines().next().unwrap(),
        "{\"record\":\"query\",\"query_id\":0,\"ap_corrected\":0.2,\"ap_reported\":1.0}"
    );
    let out = llc(dir.path(), &["retrieve", "--topk", "20", "--database-codes", db_path.to_str().unwrap(), "--query-codes", q_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn split_phases_match_the_joint_run() {
    let joint = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let small = "bits = 6\nhidden = 16\nphase1_epochs = 8\nphase2_epochs = 4\nbatch_size = 32\n";
    for dir in [joint.path(), split.path()] {
        ok(dir, &["--set", "samples_per_class=40", "gen-data"]);
    }
    ok(joint.path(), &["--config", &config(joint.path(), small), "train"]);
    let conf = config(split.path(), small);
    ok(split.path(), &["--config", &conf, "train", "--phase", "1"]);
    assert!(!split.path().join("checkpoint.bin").exists());
    ok(split.path(), &["--config", &conf, "train", "--phase", "2"]);
    for file in ["checkpoint.bin", "checkpoint_phase1.bin", "codebook.txt"] {
        assert_eq!(fs::read(joint.path().join(file)).unwrap(), fs::read(split.path().join(file)).unwrap(), "{file}");
    }
}

fn full_pipeline(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let conf = config(dir, &format!("{SYNTHETIC16}held_out_classes = 12,13,14,15\nnested_prefixes = 4,6\n"));
    for cmd in [vec!["gen-data"], vec!["train"], vec!["eval"], vec!["retrieve"], vec!["ood"], vec!["taxonomy", "--set", "split_bit=0"]] {
        let mut args = vec!["--config", conf.as_str()];
        args.extend(cmd);
        ok(dir, &args);
    }
    let mut files: Vec<(PathBuf, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (PathBuf::from(p.file_name().unwrap()), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn pipeline_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = full_pipeline(a.path());
    let second = full_pipeline(b.path());
    let names: Vec<_> = first.iter().map(|(n, _)| n.to_string_lossy().into_owned()).collect();
    for expected in [
        "bit_split.json",
        "checkpoint.bin",
        "codebook.txt",
        "heatmap_codes.csv",
        "ood_report.jsonl",
        "ood_sweep.csv",
        "ood_verdicts.jsonl",
        "retrieval.jsonl",
        "spearman.csv",
        "taxonomy.nwk",
        "train_report.jsonl",
    ] {
        assert!(names.iter().any(|n| n == expected), "missing {expected}");
    }
    assert_eq!(first.len(), second.len());
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        assert!(x == y, "{} differs between runs", name.display());
    }
    let report = last_json(&a.path().join("train_report.jsonl"));
    assert_eq!(report["prefixes"][0]["bits"], 4);
    let rules: Vec<Value> = fs::read_to_string(a.path().join("ood_report.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rules.len(), 3);
    assert_eq!(rules[0]["rule"], "exact_miss");
    assert!(rules[1]["f1"].as_f64().unwrap() >= rules[2]["f1"].as_f64().unwrap());
}

#[test]
fn help_lists_flags_and_keys() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(dir.path(), &["--help"]);
    for flag in ["--config", "--report-dir", "--set", "--dataset", "--checkpoint", "--codebook", "--verbose"] {
        assert!(help.contains(flag), "{flag}");
    }
    for key in ["bits", "held_out_classes", "score_source", "linkage", "topk", "nested_prefixes"] {
        assert!(help.contains(&format!("  {key} ")), "{key}");
    }
    let train = ok(dir.path(), &["train", "--help"]);
    assert!(train.contains("--phase"));
    let retrieve = ok(dir.path(), &["retrieve", "--help"]);
    assert!(retrieve.contains("--database-codes") && retrieve.contains("--topk"));
}
