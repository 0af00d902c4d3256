use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_mosig");
const SMALL: [&str; 6] = ["--set", "hidden_size=12", "--set", "embedding_dim=8", "--set", "num_recurrent_layers=1"];

fn mosig(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("DEEPHUMS_SEED")
        .output()
        .expect("spawn mosig")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mosig(dir, args);
    assert!(
        out.status.success(),
        "mosig {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(out: &Output, code: i32) -> String {
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(out.status.code(), Some(code), "stderr:\n{err}");
    assert!(err.lines().any(|l| l.starts_with("ERROR: ")), "stderr:\n{err}");
    err
}

fn data_lines(path: PathBuf) -> usize {
    fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with('#')).count()
}

fn synth(dir: &Path, per_class: &str) {
    ok(dir, &["synth", "--out", "ds", "--per-class", per_class, "--min-len", "15", "--max-len", "30", "--seed", "1"]);
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--manifest", "ds/manifest.tsv", "--topology", "ds/topology.txt", "--regime", "supervised", "--out", out,
        "--epochs", "2",
    ];
    args.extend(SMALL);
    args.extend(extra);
    mosig(dir, &args)
}

#[test]
fn synth_augment_and_ingest_write_consistent_datasets() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, "3");
    assert_eq!(data_lines(d.join("ds/manifest.tsv")), 24);
    assert_eq!(fs::read_dir(d.join("ds/seqs")).unwrap().count(), 24);

    let common = ["--manifest", "ds/manifest.tsv", "--topology", "ds/topology.txt"];
    let mut args = vec!["augment"];
    args.extend(common);
    args.extend(["--out", "aug", "--speeds"]);
    ok(d, &args);
    let manifest = fs::read_to_string(d.join("aug/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 72);
    for p in ["orig", "fast", "slow"] {
        assert_eq!(manifest.lines().filter(|l| l.ends_with(&format!("\t{p}"))).count(), 24, "{p}");
    }
    assert_eq!(fs::read_to_string(d.join("aug/errors.txt")).unwrap(), "id\terror\n");

    let mut args = vec!["ingest"];
    args.extend(common);
    args.extend(["--out", "ing", "--normalize"]);
    ok(d, &args);
    assert_eq!(data_lines(d.join("ing/manifest.tsv")), 24);
    assert!(d.join("ing/bone_lengths.txt").is_file());
    assert!(d.join("ing/run.lock").is_file());

    let mut args = vec!["augment"];
    args.extend(common);
    args.extend(["--out", "none"]);
    fails(&mosig(d, &args), 1);
}

#[test]
fn ingest_rejects_normalizing_sequences_with_missing_joints() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, "2");
    ok(d, &["augment", "--manifest", "ds/manifest.tsv", "--topology", "ds/topology.txt", "--out", "aug", "--dropout", "0.2"]);
    let out = mosig(
        d,
        &["ingest", "--manifest", "aug/manifest.tsv", "--topology", "ds/topology.txt", "--out", "ing", "--normalize"],
    );
    let err = fails(&out, 1);
    assert!(err.contains("16 sequence(s) rejected"), "{err}");
    let errors = fs::read_to_string(d.join("ing/errors.txt")).unwrap();
    assert_eq!(errors.lines().count(), 17);
    assert!(errors.lines().skip(1).all(|l| l.split('\t').next().unwrap().ends_with("_noisy")));
}

#[test]
fn full_pipeline_produces_every_output() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, "10");
    let ds = ["--manifest", "ds/manifest.tsv", "--topology", "ds/topology.txt"];
    let out = train(d, "p.bin", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["p.bin", "p.bin.log.csv", "p.bin.run.lock"] {
        assert!(d.join(f).is_file(), "{f}");
    }
    let lock = fs::read_to_string(d.join("p.bin.run.lock")).unwrap();
    for line in ["command = train", "regime = supervised", "hidden_size = 12", "class_count = 8", "max_epochs = 2"] {
        assert!(lock.lines().any(|l| l == line), "{line}\n{lock}");
    }

    let mut args = vec!["index", "--params", "p.bin", "--split", "train", "--out", "idx.bin"];
    args.extend(ds);
    assert!(ok(d, &args).contains("indexed 64 sequences (8-d)"));

    let seq = "ds/seqs/c3_008.skel";
    let stdout = ok(
        d,
        &["query", "--index", "idx.bin", "--params", "p.bin", "--topology", "ds/topology.txt", "--sequence", seq, "-k", "4"],
    );
    assert_eq!(stdout.lines().count(), 4);
    let csv = fs::read_to_string(d.join("query_results.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("rank,id,distance,label"));
    assert_eq!(csv.lines().count(), 5);

    let mut args = vec!["evaluate", "--index", "idx.bin", "--params", "p.bin", "--out", "rep", "-n", "3", "--dtw-k", "2"];
    args.extend(ds);
    let summary = ok(d, &args);
    assert!(summary.starts_with("queries: 16\n"), "{summary}");
    for f in ["report.csv", "pr_curve.csv", "summary.txt", "latency.txt", "run.lock"] {
        assert!(d.join("rep").join(f).is_file(), "{f}");
    }
    assert_eq!(data_lines(d.join("rep/report.csv")), 17);
    let latency = fs::read_to_string(d.join("rep/latency.txt")).unwrap();
    assert!(latency.contains("index_size: 64\ntimed_queries: 100\n"), "{latency}");

    let mut args = vec!["submotion", "train", "--full", "p.bin", "--out", "s.bin", "--epochs", "1"];
    args.extend(ds);
    ok(d, &args);
    assert!(d.join("s.bin.log.csv").is_file());
    let stdout = ok(
        d,
        &[
            "submotion", "query", "--params", "s.bin", "--index", "idx.bin", "--topology", "ds/topology.txt", "--sequence", seq,
            "--start", "2", "--end", "12",
        ],
    );
    assert_eq!(stdout.lines().count(), 5);

    // Full-sequence params are not a sub-motion encoder, and vice versa.
    let out = mosig(
        d,
        &[
            "submotion", "query", "--params", "p.bin", "--index", "idx.bin", "--topology", "ds/topology.txt", "--sequence", seq,
            "--start", "2", "--end", "12",
        ],
    );
    fails(&out, 1);
    let mut args = vec!["index", "--params", "s.bin", "--out", "idx2.bin"];
    args.extend(ds);
    fails(&mosig(d, &args), 1);
}

#[test]
fn single_thread_reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, "3");
    for out in ["a.bin", "b.bin"] {
        let o = train(d, out, &["--threads", "1", "--seed", "9"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(d.join("a.bin")).unwrap(), fs::read(d.join("b.bin")).unwrap());
    let strip = |p: &str| -> Vec<String> {
        fs::read_to_string(d.join(p))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(strip("a.bin.log.csv"), strip("b.bin.log.csv"));

    let o = train(d, "c.bin", &["--threads", "2", "--seed", "9"]);
    assert!(o.status.success());
    assert_eq!(fs::read(d.join("a.bin")).unwrap(), fs::read(d.join("c.bin")).unwrap());
}

#[test]
fn existing_outputs_need_force() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, "2");
    assert!(train(d, "p.bin", &[]).status.success());
    let before = fs::read(d.join("p.bin")).unwrap();
    let err = fails(&train(d, "p.bin", &["--seed", "4"]), 1);
    assert!(err.contains("--force"), "{err}");
    assert_eq!(fs::read(d.join("p.bin")).unwrap(), before);
    assert!(train(d, "p.bin", &["--seed", "4", "--force"]).status.success());
    assert_ne!(fs::read(d.join("p.bin")).unwrap(), before);
}

#[test]
fn supervised_training_needs_labels() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, "2");
    // Strip labels from both the manifest and the sequence headers.
    let manifest = fs::read_to_string(d.join("ds/manifest.tsv")).unwrap();
    let mut unlabeled = String::new();
    for line in manifest.lines() {
        if line.starts_with('#') {
            unlabeled.push_str(line);
        } else {
            let mut cols: Vec<&str> = line.split('\t').collect();
            cols[2] = "-";
            unlabeled.push_str(&cols.join("\t"));
        }
        unlabeled.push('\n');
    }
    fs::write(d.join("ds/manifest.tsv"), unlabeled).unwrap();
    for e in fs::read_dir(d.join("ds/seqs")).unwrap() {
        let p = e.unwrap().path();
        let text = fs::read_to_string(&p).unwrap();
        let (head, body) = text.split_once('\n').unwrap();
        let head: Vec<&str> = head.split(' ').filter(|t| !t.starts_with("label=")).collect();
        fs::write(&p, format!("{}\n{body}", head.join(" "))).unwrap();
    }
    let err = fails(&train(d, "p.bin", &[]), 1);
    assert!(err.contains("class labels"), "{err}");
    assert!(!d.join("p.bin").exists());

    let mut args = vec![
        "train", "--manifest", "ds/manifest.tsv", "--topology", "ds/topology.txt", "--regime", "self", "--out", "p.bin",
        "--epochs", "1",
    ];
    args.extend(SMALL);
    ok(d, &args);
}

#[test]
fn seed_comes_from_flag_then_environment() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let run = |out: &str, flag: Option<&str>, env: Option<&str>| {
        let mut cmd = Command::new(BIN);
        cmd.current_dir(d).env_remove("DEEPHUMS_SEED");
        cmd.args(["synth", "--out", out, "--per-class", "1", "--min-len", "15", "--max-len", "20"]);
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        if let Some(v) = env {
            cmd.env("DEEPHUMS_SEED", v);
        }
        cmd.output().unwrap()
    };
    let seqs = |out: &str| fs::read(d.join(out).join("seqs/c0_000.skel")).unwrap();
    assert!(run("flag", Some("5"), None).status.success());
    assert!(run("env", None, Some("5")).status.success());
    assert!(run("both", Some("5"), Some("6")).status.success());
    assert!(run("zero", None, None).status.success());
    assert_eq!(seqs("flag"), seqs("env"));
    assert_eq!(seqs("flag"), seqs("both"));
    assert_ne!(seqs("flag"), seqs("zero"));
    assert!(fs::read_to_string(d.join("env/run.lock")).unwrap().contains("seed = 5\n"));

    let err = fails(&run("bad", None, Some("five")), 1);
    assert!(err.contains("DEEPHUMS_SEED"), "{err}");
}

#[test]
fn error_classes_map_to_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();

    let err = fails(&mosig(d, &["frobnicate"]), 1);
    assert!(err.starts_with("ERROR: usage:"), "{err}");
    fails(&mosig(d, &["train", "--regime", "supervised"]), 1);
    fails(&mosig(d, &["--threads", "0", "synth", "--out", "x"]), 1);

    // Missing inputs.
    let err = fails(
        &mosig(d, &["index", "--manifest", "no.tsv", "--topology", "no.txt", "--params", "no.bin", "--out", "i.bin"]),
        1,
    );
    assert!(err.contains("does not exist"), "{err}");

    synth(d, "2");
    // Corrupt parameter file.
    fs::write(d.join("junk.bin"), b"not a parameter file").unwrap();
    fails(
        &mosig(d, &["index", "--manifest", "ds/manifest.tsv", "--topology", "ds/topology.txt", "--params", "junk.bin", "--out", "i.bin"]),
        1,
    );
    // Unknown config key.
    let err = fails(&train(d, "p.bin", &["--set", "learning_rat=0.1"]), 1);
    assert!(err.contains("learning_rat"), "{err}");

    // An unwritable output is an I/O failure.
    fails(&train(d, "missing_dir/p.bin", &[]), 2);

    assert!(mosig(d, &["--help"]).status.success());
    assert!(mosig(d, &["--version"]).status.success());
}

#[test]
fn dimension_mismatch_between_index_and_params_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d, "2");
    assert!(train(d, "p8.bin", &[]).status.success());
    assert!(train(d, "p4.bin", &["--set", "embedding_dim=4"]).status.success());
    ok(d, &["index", "--manifest", "ds/manifest.tsv", "--topology", "ds/topology.txt", "--params", "p8.bin", "--out", "idx.bin"]);
    let err = fails(
        &mosig(
            d,
            &[
                "query", "--index", "idx.bin", "--params", "p4.bin", "--topology", "ds/topology.txt", "--sequence",
                "ds/seqs/c0_000.skel",
            ],
        ),
        1,
    );
    assert!(err.contains("8-d"), "{err}");
}

#[test]
fn reruns_and_edge_inputs() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    // Two sequences per class: performers p0 and p1 only, so no test split.
    synth(d, "2");
    assert!(train(d, "p.bin", &[]).status.success());
    let ds = ["--manifest", "ds/manifest.tsv", "--topology", "ds/topology.txt"];
    for out in ["i1.bin", "i2.bin"] {
        let mut args = vec!["--threads", "1", "index", "--params", "p.bin", "--split", "all", "--out", out];
        args.extend(ds);
        ok(d, &args);
    }
    assert_eq!(fs::read(d.join("i1.bin")).unwrap(), fs::read(d.join("i2.bin")).unwrap());

    // Self-query: the sequence itself at rank 1, distance 0.
    let q = ["query", "--index", "i1.bin", "--params", "p.bin", "--topology", "ds/topology.txt", "--sequence"];
    let mut args = q.to_vec();
    args.extend(["ds/seqs/c5_001.skel", "--out", "self.csv"]);
    ok(d, &args);
    let csv = fs::read_to_string(d.join("self.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert_eq!(csv.lines().nth(1), Some("1,c5_001,0,5"));

    fs::write(d.join("bad.skel"), "#skeleton v1 joints=15 fps=30\n1 2 3\n").unwrap();
    let mut args = q.to_vec();
    args.extend(["bad.skel"]);
    fails(&mosig(d, &args), 1);

    // Empty test split: header-only report files, identical on rerun.
    for out in ["r1", "r2"] {
        let mut args = vec!["--threads", "1", "evaluate", "--index", "i1.bin", "--params", "p.bin", "--out", out];
        args.extend(ds);
        ok(d, &args);
    }
    assert_eq!(fs::read_to_string(d.join("r1/report.csv")).unwrap().lines().count(), 1);
    assert_eq!(fs::read_to_string(d.join("r1/pr_curve.csv")).unwrap(), "recall,precision\n");
    for f in ["report.csv", "pr_curve.csv", "summary.txt", "latency.txt"] {
        assert_eq!(fs::read(d.join("r1").join(f)).unwrap(), fs::read(d.join("r2").join(f)).unwrap(), "{f}");
    }
    let mut args = vec!["--threads", "1", "evaluate", "--index", "i1.bin", "--params", "p.bin", "--split", "train", "--out", "r3"];
    args.extend(ds);
    assert!(ok(d, &args).starts_with("queries: 16\n"));

    let mut args = vec!["submotion", "train", "--full", "absent.bin", "--out", "s.bin"];
    args.extend(ds);
    let err = fails(&mosig(d, &args), 1);
    assert!(err.contains("absent.bin"), "{err}");
    assert!(!d.join("s.bin").exists());
}
