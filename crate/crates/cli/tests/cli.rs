//! End-to-end behaviour of the `memiml` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use memiml::checkpoint::Checkpoint;
use memiml::tasks::{save_episodes, TaskFamily, TaskFamilySpec};
use sha2::{Digest, Sha256};

const SMALL: &[&str] = &[
    "--set=task.n_train_tasks=10",
    "--set=task.n_test_tasks=4",
    "--set=task.shots=5",
    "--set=task.queries=5",
    "--set=meta.hidden=8",
    "--set=meta.key_dim=4",
    "--set=meta.vp_hidden=8",
    "--set=meta.n_neighbors=3",
    "--set=meta.meta_batch=2",
    "--set=local.steps=2",
    "--set=run.eval_every=2",
];

fn memiml(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memiml"))
        .args(args)
        .env("MEMIML_OUT", root.join("runs"))
        .env("RUST_LOG", "warn")
        .current_dir(root)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "exit {:?}\nstderr:\n{stderr}", out.status);
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn failed(out: &Output) -> String {
    assert!(!out.status.success(), "expected failure, stdout:\n{}", String::from_utf8_lossy(&out.stdout));
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    SMALL.iter().copied().chain(extra.iter().copied()).collect()
}

fn train(root: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let mut a = vec!["train", "--name", name];
    a.extend(args(extra));
    ok(&memiml(root, &a));
    root.join("runs").join(name)
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

/// Data rows (no comments, no header).
fn rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .find(|l| !l.starts_with('#'))
        .unwrap()
        .to_string()
}

#[test]
fn zero_steps_writes_header_and_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train(tmp.path(), "zero", &["--steps", "0"]);
    let csv = dir.join("metrics.csv");
    assert_eq!(header(&csv), "step,phase,pre_update_loss,post_update_loss,gap,metric,seed");
    assert!(rows(&csv).is_empty());
    let ckpt = Checkpoint::load(dir.join("checkpoint.bin")).unwrap();
    assert_eq!(ckpt.metadata["step"], 0);
    assert_eq!(ckpt.metadata["config"]["run.steps"], "0");
    assert!(ckpt.tensors.names().any(|n| n.starts_with("theta/")));
    assert!(fs::read_to_string(dir.join("config.txt")).unwrap().contains("run.steps = 0"));
}

#[test]
fn identical_runs_write_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train(tmp.path(), "a", &["--steps", "4"]);
    let b = train(tmp.path(), "b", &["--steps", "4"]);
    assert_eq!(sha(&a.join("metrics.csv")), sha(&b.join("metrics.csv")));
    assert_eq!(sha(&a.join("checkpoint.bin")), sha(&b.join("checkpoint.bin")));
    let c = train(tmp.path(), "c", &["--steps", "4", "--seed", "1"]);
    assert_ne!(sha(&a.join("metrics.csv")), sha(&c.join("metrics.csv")));
    let r = rows(&a.join("metrics.csv"));
    assert_eq!(r.len(), 6);
    assert_eq!(r.iter().filter(|row| row[1] == "test").count(), 2);
    for row in &r {
        let pre: f64 = row[2].parse().unwrap();
        let post: f64 = row[3].parse().unwrap();
        let gap: f64 = row[4].parse().unwrap();
        assert_eq!(gap, pre - post);
        assert_eq!(row[6], "0");
    }
}

#[test]
fn ablation_and_config_are_echoed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train(tmp.path(), "abl", &["--steps", "1", "--ablation", "no-local-adaptation"]);
    let text = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(text.contains("# meta.ablation = no-local-adaptation"));
    assert!(text.contains("# seed = 0"));
    let ckpt = Checkpoint::load(dir.join("checkpoint.bin")).unwrap();
    assert_eq!(ckpt.metadata["config"]["meta.ablation"], "no-local-adaptation");
    assert_eq!(ckpt.metadata["seed"], 0);
}

#[test]
fn flags_beat_overrides_beat_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.conf");
    fs::write(&cfg, "# test config\nmeta.beta = 0.3\nmeta.store_ratio = 0.5\nlocal.gamma = 0.2\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let dir = train(
        tmp.path(),
        "prec",
        &["--steps", "0", "--config", cfg, "--set", "meta.beta=0.4", "--set", "meta.store_ratio=0.6", "--beta", "0.5"],
    );
    let text = fs::read_to_string(dir.join("config.txt")).unwrap();
    assert!(text.contains("meta.beta = 0.5"), "{text}");
    assert!(text.contains("meta.store_ratio = 0.6"), "{text}");
    assert!(text.contains("local.gamma = 0.2"), "{text}");
}

#[test]
fn bad_configs_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.conf");
    fs::write(&cfg, "meta.beta = 0.3\n\nmeta.betta = 0.4\n").unwrap();
    let err = failed(&memiml(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]));
    assert!(err.contains("bad.conf:3") && err.contains("meta.betta"), "{err}");
    let err = failed(&memiml(tmp.path(), &["train", "--beta", "1.5"]));
    assert!(err.contains("beta"), "{err}");
    let err = failed(&memiml(tmp.path(), &["train", "--set", "meta.second_order=maybe"]));
    assert!(err.contains("meta.second_order"), "{err}");
    failed(&memiml(tmp.path(), &["train", "--ablation", "everything"]));
}

#[test]
fn eval_reads_without_writing_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train(tmp.path(), "ev", &["--steps", "2"]);
    let ckpt = dir.join("checkpoint.bin");
    let before = sha(&ckpt);
    let mut a = vec!["eval", "--name", "ev"];
    a.extend(args(&[]));
    let first = ok(&memiml(tmp.path(), &a));
    assert!(first.contains("accuracy"), "{first}");
    assert_eq!(sha(&ckpt), before);
    let eval_csv = dir.join("eval.csv");
    assert_eq!(header(&eval_csv), "task_id,pre_update_loss,post_update_loss,gap,metric,seed");
    let r = rows(&eval_csv);
    assert_eq!(r.len(), 5);
    assert_eq!(r[4][0], "mean");
    let first_csv = sha(&eval_csv);
    ok(&memiml(tmp.path(), &a));
    assert_eq!(sha(&eval_csv), first_csv);
    assert_eq!(sha(&ckpt), before);

    // beta = 1 evaluates without the memory path
    a.extend(["--beta", "1"]);
    ok(&memiml(tmp.path(), &a));
    assert!(fs::read_to_string(&eval_csv).unwrap().contains("# meta.beta = 1"));
    assert_eq!(sha(&ckpt), before);
}

#[test]
fn eval_rejects_mismatched_dims() {
    let tmp = tempfile::tempdir().unwrap();
    train(tmp.path(), "dims", &["--steps", "0"]);
    let mut a = vec!["eval", "--name", "dims"];
    a.extend(args(&["--set", "meta.hidden=9"]));
    let err = failed(&memiml(tmp.path(), &a));
    assert!(err.contains("checkpoint"), "{err}");
    let mut a = vec!["eval", "--name", "dims"];
    a.extend(args(&["--set", "task.family=nme-sine"]));
    let err = failed(&memiml(tmp.path(), &a));
    assert!(err.contains("input dimension"), "{err}");
}

#[test]
fn untrained_classifier_is_at_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = [
        "--steps",
        "0",
        "--set",
        "meta.method=maml",
        "--set",
        "meta.inner_lr=0",
        "--set",
        "task.n_test_tasks=40",
        "--set",
        "task.queries=10",
    ];
    train(tmp.path(), "chance", &extra);
    let mut a = vec!["eval", "--name", "chance"];
    a.extend(args(&extra));
    ok(&memiml(tmp.path(), &a));
    let r = rows(&tmp.path().join("runs/chance/eval.csv"));
    let acc: f64 = r.last().unwrap()[4].parse().unwrap();
    // 400 query samples: one standard deviation is 0.025
    assert!((acc - 0.5).abs() < 0.15, "accuracy {acc}");
}

#[test]
fn sweep_tables_have_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    for (axis, values) in [("store_ratio", "1.0,0.8,0.5,0.2"), ("n_neighbors", "5,10,20,50")] {
        let mut a = vec!["sweep", "--name", axis, "--axis", axis, "--values", values, "--steps", "2"];
        a.extend(args(&[]));
        ok(&memiml(tmp.path(), &a));
        let table = tmp.path().join("runs").join(axis).join("sweep.csv");
        assert_eq!(
            header(&table),
            "axis,value,seeds,status,pre_update_loss,post_update_loss,gap,metric,error"
        );
        let r = rows(&table);
        let got: Vec<&str> = r.iter().map(|row| row[1].as_str()).collect();
        assert_eq!(got, values.split(',').collect::<Vec<_>>());
        assert!(r.iter().all(|row| row[0] == axis && row[3] == "ok"));
    }
}

#[test]
fn single_value_sweep_matches_train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = ["--steps", "2", "--beta", "0.5"];
    let mut a = vec!["sweep", "--name", "sw", "--axis", "beta", "--values", "0.5"];
    a.extend(args(&extra));
    ok(&memiml(tmp.path(), &a));
    let cell = tmp.path().join("runs/sw/beta-0.5/seed-0");

    let dir = train(tmp.path(), "direct", &extra);
    let mut e = vec!["eval", "--name", "direct"];
    e.extend(args(&extra));
    ok(&memiml(tmp.path(), &e));
    for file in ["metrics.csv", "eval.csv", "checkpoint.bin"] {
        assert_eq!(sha(&cell.join(file)), sha(&dir.join(file)), "{file}");
    }
    let table = rows(&tmp.path().join("runs/sw/sweep.csv"));
    let eval = rows(&dir.join("eval.csv"));
    assert_eq!(table[0][7], eval.last().unwrap()[4]);
}

#[test]
fn failing_cells_are_recorded_and_fail_the_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let mut a = vec!["sweep", "--name", "bad", "--axis", "beta", "--values", "0.2,0.8", "--steps", "1"];
    a.extend(args(&["--set", "task.test_file=missing.jsonl"]));
    let err = failed(&memiml(tmp.path(), &a));
    assert!(err.contains("2 of 2"), "{err}");
    let r = rows(&tmp.path().join("runs/bad/sweep.csv"));
    assert_eq!(r.len(), 2);
    assert!(r.iter().all(|row| row[3] == "failed" && row[8].contains("missing.jsonl")));

    let mut a = vec!["sweep", "--name", "bad", "--axis", "beta", "--values", "0.2,2.0"];
    a.extend(args(&[]));
    let err = failed(&memiml(tmp.path(), &a));
    assert!(err.contains("`2.0`"), "{err}");
}

fn write_metrics(path: &Path, gaps: &[(f64, f64)]) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    let mut s = String::from("# seed = 0\nstep,phase,pre_update_loss,post_update_loss,gap,metric,seed\n");
    for (i, (pre, post)) in gaps.iter().enumerate() {
        s.push_str(&format!("{},train,{pre},{post},{},0.5,0\n", i + 1, pre - post));
    }
    fs::write(path, s).unwrap();
}

#[test]
fn diagnose_reports_terminal_and_peak_gaps() {
    let tmp = tempfile::tempdir().unwrap();
    let flat = tmp.path().join("flat/metrics.csv");
    let constant = tmp.path().join("constant/metrics.csv");
    write_metrics(&flat, &vec![(0.7, 0.7); 40]);
    write_metrics(&constant, &vec![(1.0, 0.75); 40]);
    let out = tmp.path().join("diag");
    ok(&memiml(
        tmp.path(),
        &["diagnose", flat.to_str().unwrap(), constant.to_str().unwrap(), "--out", out.to_str().unwrap()],
    ));
    let report = rows(&out.join("gap_report.csv"));
    assert_eq!(header(&out.join("gap_report.csv")), "run,phase,points,peak_gap,terminal_gap");
    assert_eq!(report[0][..3], ["flat", "train", "40"]);
    assert_eq!(report[0][4].parse::<f64>().unwrap(), 0.0);
    assert_eq!(report[1][0], "constant");
    assert!((report[1][4].parse::<f64>().unwrap() - 0.25).abs() < 1e-12);
    assert!((report[1][3].parse::<f64>().unwrap() - 0.25).abs() < 1e-12);
    assert_eq!(rows(&out.join("gap_curves.csv")).len(), 80);
    let svg = fs::read_to_string(out.join("gap_curves.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("flat: seed = 0"));

    // default output location comes from the environment
    ok(&memiml(tmp.path(), &["diagnose", flat.to_str().unwrap(), constant.to_str().unwrap()]));
    assert!(tmp.path().join("runs/diagnose/gap_report.csv").exists());
}

#[test]
fn diagnose_rejects_bad_input() {
    let tmp = tempfile::tempdir().unwrap();
    let good = tmp.path().join("good/metrics.csv");
    write_metrics(&good, &[(1.0, 0.5)]);
    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "step,phase,pre_update_loss\n1,train,0.5\n").unwrap();
    let err = failed(&memiml(tmp.path(), &["diagnose", good.to_str().unwrap(), bad.to_str().unwrap()]));
    assert!(err.contains("missing column(s): post_update_loss, gap"), "{err}");
    failed(&memiml(tmp.path(), &["diagnose", good.to_str().unwrap()]));
}

#[test]
fn trains_from_episode_files() {
    let tmp = tempfile::tempdir().unwrap();
    let family = TaskFamily::new(TaskFamilySpec {
        n_train_tasks: 6,
        n_test_tasks: 3,
        ..TaskFamilySpec::default()
    })
    .unwrap();
    let train_eps: Vec<_> = std::sync::Arc::new(family.clone()).train_stream().take(6).collect();
    save_episodes(tmp.path().join("train.jsonl"), &train_eps).unwrap();
    save_episodes(tmp.path().join("test.jsonl"), &family.test_episodes()).unwrap();
    let dir = train(
        tmp.path(),
        "files",
        &["--steps", "4", "--set", "task.train_file=train.jsonl", "--set", "task.test_file=test.jsonl"],
    );
    assert_eq!(rows(&dir.join("metrics.csv")).len(), 6);
    let mut a = vec!["eval", "--name", "files", "--set", "task.train_file=train.jsonl", "--set", "task.test_file=test.jsonl"];
    a.extend(args(&[]));
    ok(&memiml(tmp.path(), &a));
    assert_eq!(rows(&dir.join("eval.csv")).len(), 4);
}
