//! Acceptance gate. Runs every criterion at its stated tolerance, prints one
//! `criterion N: PASS|FAIL ...` line each and exits nonzero if any fails.
//!
//! Criteria 6 to 8 train 25 runs at the settings in `configs/acceptance.conf`
//! and take a while on one core.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use memiml::imitation::{local_adapt, local_loss, LocalAdaptConfig};
use memiml::memory::{diversity_score, MemorySlot, TaskMemory, WriteOutcome};
use memiml::metalearn::Phase;
use memiml::nets::{one_hot, BaseModel, HeadKind, KeyNetwork, ValueKind, ValuePredictor};
use memiml::numgrad::{
    grad_through_update, max_relative_error, numeric_grad, Activation, Dense, GradError, Graph, ParamSet, ParamVars,
    Tape, Tensor, Var,
};
use memiml::DiffOrder;
use memiml_cli::diagnose::{self, GapSummary};
use memiml_cli::run::{self, SweepAxis, CHECKPOINT_FILE, EVAL_FILE, METRICS_FILE, SWEEP_FILE};
use memiml_cli::ExperimentConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/acceptance.conf");

const FD_CASES: usize = 120;
const FD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-3;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// MAML's terminal train gap must fall below this fraction of its peak.
const MAML_COLLAPSE: f64 = 0.25;
/// MemIML's terminal train gap must stay above this fraction of its peak.
const MEMIML_RETAIN: f64 = 0.5;
const MAJORITY: usize = 4;

const ABLATIONS: [&str; 3] = ["no-similarity-search", "no-value-predictor", "no-local-adaptation"];

type Outcome = Result<(bool, String)>;

fn base_config(out: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_file(Path::new(CONFIG))?;
    cfg.run.out = out.to_path_buf();
    Ok(cfg)
}

fn sha(path: &Path) -> Result<Vec<u8>> {
    Ok(Sha256::digest(fs::read(path).with_context(|| format!("reading {}", path.display()))?).to_vec())
}

// --- 1: finite differences ---------------------------------------------------

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect())
}

fn one_hots(rng: &mut ChaCha8Rng, rows: usize, classes: usize) -> Tensor {
    let data = (0..rows)
        .flat_map(|_| one_hot(rng.random_range(0..classes), classes).into_data())
        .collect();
    Tensor::matrix(rows, classes, data)
}

fn jitter(params: &ParamSet, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut out = params.clone();
    for (name, t) in params.iter() {
        for (i, &x) in t.data().iter().enumerate() {
            out.set_element(name, i, x + rng.random_range(-0.3..0.3)).unwrap();
        }
    }
    out
}

fn value_of(params: &ParamSet, f: &dyn Fn(&Tape, &ParamVars) -> Result<Var, GradError>) -> Result<f64, GradError> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = f(&tape, &bound)?;
    Ok(tape.item(loss))
}

fn analytic(params: &ParamSet, f: &dyn Fn(&Tape, &ParamVars) -> Result<Var, GradError>) -> Result<ParamSet, GradError> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = f(&tape, &bound)?;
    Ok(bound.grad_values(&tape, loss)?.grads)
}

fn fd_error(params: &ParamSet, f: &dyn Fn(&Tape, &ParamVars) -> Result<Var, GradError>) -> Result<f64, GradError> {
    let numeric = numeric_grad(params, FD_STEP, |p| value_of(p, f))?;
    max_relative_error(&analytic(params, f)?, &numeric, FD_FLOOR)
}

fn fd_case(case: usize, rng: &mut ChaCha8Rng) -> Result<f64, GradError> {
    let rows = rng.random_range(1..5);
    let a = rng.random_range(1..5);
    let b = rng.random_range(2..7);
    let c = rng.random_range(2..4);
    match case % 6 {
        0 => {
            let model = BaseModel::new(HeadKind::Label { classes: c }, a, b);
            let theta = model.init_params(rng);
            let theta = jitter(&theta, rng);
            let (x, y) = (uniform(rng, rows, a), one_hots(rng, rows, c));
            fd_error(&theta, &|t, p| {
                let logits = model.record(t, p, t.leaf(x.clone()), None).unwrap();
                t.softmax_cross_entropy(logits, t.leaf(y.clone()))
            })
        }
        1 => {
            let model = BaseModel::new(HeadKind::Vector { target_dim: 1, value_dim: c }, a, b);
            let theta = model.init_params(rng);
            let theta = jitter(&theta, rng);
            let (x, cond, y) = (uniform(rng, rows, a), uniform(rng, rows, c), uniform(rng, rows, 1));
            fd_error(&theta, &|t, p| {
                let pred = model.record(t, p, t.leaf(x.clone()), Some(t.leaf(cond.clone()))).unwrap();
                t.mse(pred, t.leaf(y.clone()))
            })
        }
        2 | 3 => {
            let kind = if case % 6 == 2 { ValueKind::Label } else { ValueKind::Vector };
            let vp = ValuePredictor::new(a, b, c, kind);
            let omega = vp.init_params(rng);
            let keys = uniform(rng, rows, a);
            let values = match kind {
                ValueKind::Label => one_hots(rng, rows, c),
                ValueKind::Vector => uniform(rng, rows, c),
            };
            fd_error(&omega, &|t, p| Ok(vp.rec_loss(t, p, t.leaf(keys.clone()), t.leaf(values.clone())).unwrap()))
        }
        4 => {
            let net = KeyNetwork::new(a, c, rng);
            let (x, target) = (uniform(rng, rows, a), uniform(rng, rows, c));
            let graph = Graph::new(vec![Dense::new("key", Activation::Tanh)]);
            fd_error(net.params(), &|t, p| {
                let k = graph.record(t, p, t.leaf(x.clone()))?;
                t.mse(k, t.leaf(target.clone()))
            })
        }
        _ => {
            let label = case % 12 == 5;
            let head = if label {
                HeadKind::Label { classes: c }
            } else {
                HeadKind::Vector { target_dim: 1, value_dim: c }
            };
            let model = BaseModel::new(head, a, b);
            let theta = model.init_params(rng);
            let theta = jitter(&theta, rng);
            let lr = rng.random_range(0.01..0.5);
            let (xs, xq) = (uniform(rng, rows, a), uniform(rng, rows + 1, a));
            let (ys, yq) = if label {
                (one_hots(rng, rows, c), one_hots(rng, rows + 1, c))
            } else {
                (uniform(rng, rows, 1), uniform(rng, rows + 1, 1))
            };
            let model = &model;
            let loss = |x: &Tensor, y: &Tensor| {
                let (x, y) = (x.clone(), y.clone());
                move |t: &Tape, p: &ParamVars| -> Result<Var, GradError> {
                    let xv = t.leaf(x.clone());
                    if label {
                        let logits = model.record(t, p, xv, None).unwrap();
                        t.softmax_cross_entropy(logits, t.leaf(y.clone()))
                    } else {
                        let zeros = t.leaf(Tensor::zeros(&[x.rows(), c]));
                        let pred = model.record(t, p, xv, Some(zeros)).unwrap();
                        t.mse(pred, t.leaf(y.clone()))
                    }
                }
            };
            let (inner, outer) = (loss(&xs, &ys), loss(&xq, &yq));
            let got = grad_through_update(&theta, lr, 1, DiffOrder::Second, &inner, &outer)?;
            let numeric = numeric_grad(&theta, FD_STEP, |p| {
                let adapted = p.axpy(-lr, &analytic(p, &inner)?)?;
                value_of(&adapted, &outer)
            })?;
            max_relative_error(&got.grad, &numeric, FD_FLOOR)
        }
    }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for case in 0..FD_CASES {
        let err = fd_case(case, &mut rng)?;
        if !(err < FD_TOL) {
            failures += 1;
        }
        worst = worst.max(err);
    }
    // the local proximal objective against its closed-form gradient
    let vp = ValuePredictor::new(3, 5, 2, ValueKind::Vector);
    let anchor = vp.init_params(&mut rng);
    let w = anchor.map(|x| x + 0.3 * (x * 7.0).sin());
    let (keys, values) = (uniform(&mut rng, 4, 3), uniform(&mut rng, 4, 2));
    let gamma = 0.7;
    let rec = analytic(&w, &|t, p| Ok(vp.rec_loss(t, p, t.leaf(keys.clone()), t.leaf(values.clone())).unwrap()))?;
    let expected = rec.axpy(2.0 * gamma, &w.sub(&anchor)?)?;
    let numeric = numeric_grad(&w, FD_STEP, |p| Ok(local_loss(&vp, &anchor, p, &keys, &values, gamma).unwrap()))?;
    let local = max_relative_error(&expected, &numeric, FD_FLOOR)?;
    Ok((
        failures == 0 && local < FD_TOL,
        format!("{} cases, max relative error {worst:.2e}, local objective {local:.2e}", FD_CASES + 1),
    ))
}

// --- 2: scalar second-order example ------------------------------------------

fn criterion_2() -> Outcome {
    let theta = ParamSet::new().with("w", Tensor::matrix(1, 1, vec![0.0]));
    let sq = |x: f64, y: f64| {
        move |t: &Tape, p: &ParamVars| {
            let pred = t.matmul(t.leaf(Tensor::matrix(1, 1, vec![x])), p.get("w")?)?;
            let d = t.sub(pred, t.leaf(Tensor::matrix(1, 1, vec![y])))?;
            t.sum_squares(d)
        }
    };
    let second = grad_through_update(&theta, 0.1, 1, DiffOrder::Second, sq(1.0, 2.0), sq(1.0, 1.0))?;
    let first = grad_through_update(&theta, 0.1, 1, DiffOrder::First, sq(1.0, 2.0), sq(1.0, 1.0))?;
    let s = second.grad.require("w")?.item();
    let f = first.grad.require("w")?.item();
    Ok(((s + 0.96).abs() <= 1e-12 && (f + 1.2).abs() <= 1e-12, format!("second order {s}, first order {f}")))
}

// --- 3: memory ---------------------------------------------------------------

fn random_key(rng: &mut ChaCha8Rng, dim: usize, grid: bool) -> Tensor {
    loop {
        let data: Vec<f64> = (0..dim)
            .map(|_| if grid { rng.random_range(-2..=2) as f64 } else { rng.random_range(-1.0..1.0) })
            .collect();
        if data.iter().any(|&x| x != 0.0) {
            return Tensor::vector(data);
        }
    }
}

fn criterion_3() -> Outcome {
    let e1 = Tensor::vector(vec![1.0, 0.0]);
    let e2 = Tensor::vector(vec![0.0, 1.0]);
    let s = diversity_score(&[&e1, &e2])?;
    // pairwise angles {0, pi/2, pi/2, 0}
    let hand = PI / 4.0 - PI * PI / 16.0;
    let score_ok = (s - hand).abs() <= 1e-9 && (s - 0.1685).abs() < 1e-4;

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut read_mismatch = 0;
    for case in 0..1000 {
        let dim = rng.random_range(1..5);
        let cap = rng.random_range(1..25);
        let mut mem = TaskMemory::new(cap, dim, 1)?;
        for i in 0..rng.random_range(1..=cap) {
            mem.write(MemorySlot::new(random_key(&mut rng, dim, case % 2 == 0), Tensor::vector(vec![i as f64])))?;
        }
        let query = random_key(&mut rng, dim, case % 2 == 0);
        let n = rng.random_range(1..30);
        let got: Vec<usize> = mem.read(&query, n)?.iter().map(|nb| nb.index).collect();
        let mut scan: Vec<(f64, usize)> = mem
            .slots()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let d: f64 = s.key.data().iter().zip(query.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                (d.sqrt(), i)
            })
            .collect();
        scan.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if got != scan.iter().take(n).map(|&(_, i)| i).collect::<Vec<_>>() {
            read_mismatch += 1;
        }
    }

    let mut writes = 0;
    let mut decreases = 0;
    while writes < 10_000 {
        let dim = rng.random_range(2..6);
        let cap = rng.random_range(2..12);
        let mut mem = TaskMemory::new(cap, dim, 1)?;
        for i in 0..cap {
            mem.write(MemorySlot::new(random_key(&mut rng, dim, false), Tensor::vector(vec![i as f64])))?;
        }
        for _ in 0..500 {
            let before = mem.score()?;
            let outcome = mem.write(MemorySlot::new(random_key(&mut rng, dim, writes % 3 == 0), Tensor::vector(vec![-1.0])))?;
            if mem.score()? < before || outcome == WriteOutcome::Appended {
                decreases += 1;
            }
            writes += 1;
        }
    }
    Ok((
        score_ok && read_mismatch == 0 && decreases == 0,
        format!("orthogonal pair S = {s:.12}, {read_mismatch}/1000 read mismatches, {decreases}/{writes} writes lowered S"),
    ))
}

// --- 4: imitation fixed point ------------------------------------------------

fn criterion_4() -> Outcome {
    let mut worst: f64 = 0.0;
    for (k, v, w0) in [(1.0, 3.0, 0.0), (0.8, -2.0, 1.5), (1.2, 0.5, -1.0)] {
        let vp = ValuePredictor::linear(1, 1, ValueKind::Vector);
        let omega = ParamSet::new().with("vp.w", Tensor::matrix(1, 1, vec![w0]));
        let keys = Tensor::matrix(1, 1, vec![k]);
        let values = Tensor::matrix(1, 1, vec![v]);
        let cfg = LocalAdaptConfig { gamma: 0.0, steps: 20, step_size: 0.5 };
        let adapted = local_adapt(&vp, &omega, &keys, &values, &cfg)?;
        let pred = vp.predict(&adapted, &Tensor::vector(vec![k]))?.item();
        worst = worst.max((pred - v).abs());
    }
    Ok((worst <= 1e-6, format!("max |prediction - stored value| after 20 steps {worst:.2e}")))
}

// --- 5: reduction to MAML ----------------------------------------------------

fn criterion_5(root: &Path) -> Outcome {
    let run_with = |name: &str, extra: &[&str]| -> Result<_> {
        let mut cfg = base_config(&root.join("c5"))?;
        for kv in ["run.steps=100", "run.eval_every=0"].iter().chain(extra) {
            cfg.apply_override(kv)?;
        }
        cfg.run.name = name.into();
        run::train(&cfg)
    };
    let maml = run_with("maml", &["meta.method=maml"])?;
    let memiml = run_with("memiml", &["meta.method=memiml", "meta.beta=1", "meta.ablation=no-value-predictor"])?;
    let (a, b) = (&maml.metrics.rows, &memiml.metrics.rows);
    ensure!(a.len() == 100 && b.len() == 100, "expected 100 rows, got {} and {}", a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x.post_update_loss - y.post_update_loss).abs().max((x.pre_update_loss - y.pre_update_loss).abs()))
        .fold(0.0, f64::max);
    Ok((diff <= 1e-12, format!("max per-step query loss difference over 100 steps {diff:.1e}")))
}

// --- 6 to 8: the pilot-scale runs --------------------------------------------

struct Pilot {
    /// Final meta-test accuracy per variant, indexed like `SEEDS`.
    accuracy: Vec<(String, Vec<f64>)>,
    /// Train-phase gap summaries per variant.
    gaps: Vec<(String, Vec<GapSummary>)>,
}

impl Pilot {
    fn accuracy(&self, variant: &str) -> &[f64] {
        &self.accuracy.iter().find(|(v, _)| v == variant).unwrap().1
    }

    fn gaps(&self, variant: &str) -> &[GapSummary] {
        &self.gaps.iter().find(|(v, _)| v == variant).unwrap().1
    }
}

fn run_pilot(root: &Path) -> Result<Pilot> {
    let variants: Vec<&str> = ["maml", "memiml"].into_iter().chain(ABLATIONS).collect();
    let mut accuracy = Vec::new();
    let mut gaps = Vec::new();
    for variant in variants {
        let mut acc = Vec::new();
        let mut files = Vec::new();
        for seed in SEEDS {
            let mut cfg = base_config(&root.join("pilot"))?;
            match variant {
                "maml" => cfg.set("meta.method", "maml")?,
                "memiml" => cfg.set("meta.method", "memiml")?,
                ablation => {
                    cfg.set("meta.method", "memiml")?;
                    cfg.set("meta.ablation", ablation)?;
                }
            }
            cfg.set("seed", &seed.to_string())?;
            cfg.run.name = format!("{variant}-s{seed}");
            let started = Instant::now();
            let outcome = run::train(&cfg)?;
            let a = outcome.metrics.final_metric(Phase::Test).context("no test evaluation")?;
            eprintln!("  {variant} seed {seed}: accuracy {a:.3} ({:.0}s)", started.elapsed().as_secs_f64());
            acc.push(a);
            files.push(outcome.dir.join(METRICS_FILE));
        }
        let summaries = diagnose::diagnose(&files, &root.join("diagnose").join(variant))?
            .into_iter()
            .filter(|s| s.phase == Phase::Train)
            .collect::<Vec<_>>();
        ensure!(summaries.len() == SEEDS.len(), "missing train-phase gap summaries for {variant}");
        accuracy.push((variant.to_string(), acc));
        gaps.push((variant.to_string(), summaries));
    }
    Ok(Pilot { accuracy, gaps })
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn criterion_6(p: &Pilot) -> Outcome {
    let ratio = |s: &GapSummary| s.terminal_gap / s.peak_gap;
    let maml = p.gaps("maml");
    let memiml = p.gaps("memiml");
    let collapsed = maml.iter().all(|s| s.peak_gap > 0.0 && ratio(s) < MAML_COLLAPSE);
    let retained = maml
        .iter()
        .zip(memiml)
        .filter(|(a, b)| b.peak_gap > 0.0 && ratio(b) > MEMIML_RETAIN && b.terminal_gap > a.terminal_gap)
        .count();
    let ratios = |xs: &[GapSummary]| fmt(&xs.iter().map(ratio).collect::<Vec<_>>());
    Ok((
        collapsed && retained >= MAJORITY,
        format!(
            "terminal/peak train gap: maml [{}], memiml [{}]; memiml retains and beats maml on {retained}/5 seeds",
            ratios(maml),
            ratios(memiml)
        ),
    ))
}

fn criterion_7(p: &Pilot) -> Outcome {
    let (maml, memiml) = (p.accuracy("maml"), p.accuracy("memiml"));
    let wins = maml.iter().zip(memiml).filter(|(a, b)| b > a).count();
    Ok((
        wins >= MAJORITY,
        format!("accuracy memiml [{}] vs maml [{}]: {wins}/5 seeds", fmt(memiml), fmt(maml)),
    ))
}

fn criterion_8(p: &Pilot) -> Outcome {
    let full = mean(p.accuracy("memiml"));
    let means: Vec<f64> = ABLATIONS.iter().map(|a| mean(p.accuracy(a))).collect();
    let ordered = means.iter().all(|&m| full >= m);
    let worst_local = (0..SEEDS.len())
        .filter(|&i| {
            let local = p.accuracy("no-local-adaptation")[i];
            ABLATIONS[..2].iter().all(|a| local < p.accuracy(a)[i])
        })
        .count();
    let detail = ABLATIONS
        .iter()
        .zip(&means)
        .map(|(a, m)| format!("{a} {m:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((
        ordered && worst_local * 2 > SEEDS.len(),
        format!("mean accuracy memiml {full:.3}, {detail}; no-local-adaptation worst on {worst_local}/5 seeds"),
    ))
}

// --- 9: sweeps ---------------------------------------------------------------

fn small_run(cfg: &mut ExperimentConfig) -> Result<()> {
    for kv in ["run.steps=20", "run.eval_every=0", "task.n_test_tasks=5"] {
        cfg.apply_override(kv)?;
    }
    Ok(())
}

fn criterion_9(root: &Path) -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for (axis, values) in [
        (SweepAxis::StoreRatio, ["1", "0.8", "0.5", "0.2"]),
        (SweepAxis::NNeighbors, ["5", "10", "20", "50"]),
    ] {
        let mut cfg = base_config(&root.join("c9"))?;
        small_run(&mut cfg)?;
        cfg.run.name = axis.as_str().into();
        let values: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        let rows = run::sweep(&cfg, axis, &values, &[0])?;
        let table = fs::read_to_string(cfg.run_dir().join(SWEEP_FILE))?;
        let mut lines = table.lines().filter(|l| !l.starts_with('#'));
        let header = lines.next().unwrap_or_default();
        let body: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        let width = header.split(',').count();
        let well_formed = rows.len() == 4
            && rows.iter().all(|r| r.result.is_ok())
            && body.len() == 4
            && body.iter().all(|r| r.len() == width && r[0] == axis.as_str() && r[3] == "ok")
            && body.iter().zip(&values).all(|(r, v)| r[1] == v)
            && body.iter().all(|r| r[4..8].iter().all(|x| x.parse::<f64>().is_ok_and(f64::is_finite)));
        ok &= well_formed;
        notes.push(format!("{} {} rows", axis.as_str(), body.len()));
    }
    Ok((ok, notes.join(", ")))
}

// --- 10: determinism and purity ----------------------------------------------

fn criterion_10(root: &Path) -> Outcome {
    let cfg_for = |name: &str| -> Result<ExperimentConfig> {
        let mut cfg = base_config(&root.join("c10"))?;
        small_run(&mut cfg)?;
        cfg.apply_override("run.eval_every=10")?;
        cfg.run.name = name.into();
        Ok(cfg)
    };
    let (a, b) = (cfg_for("a")?, cfg_for("b")?);
    let da = run::train(&a)?.dir;
    let db = run::train(&b)?.dir;
    let same_csv = sha(&da.join(METRICS_FILE))? == sha(&db.join(METRICS_FILE))?;
    let same_ckpt = sha(&da.join(CHECKPOINT_FILE))? == sha(&db.join(CHECKPOINT_FILE))?;

    let ckpt: PathBuf = da.join(CHECKPOINT_FILE);
    let before = fs::read(&ckpt)?;
    run::eval(&a, &ckpt)?;
    let first_eval = sha(&da.join(EVAL_FILE))?;
    run::eval(&a, &ckpt)?;
    let pure = fs::read(&ckpt)? == before;
    let repeatable = sha(&da.join(EVAL_FILE))? == first_eval;
    Ok((
        same_csv && same_ckpt && pure && repeatable,
        format!(
            "metrics.csv equal {same_csv}, checkpoint equal {same_ckpt}, checkpoint unchanged by eval {pure}, eval repeatable {repeatable}"
        ),
    ))
}

fn report(n: usize, started: Instant, outcome: Outcome) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok((pass, detail)) => {
            println!("criterion {n}: {} {detail} ({secs:.1}s)", if pass { "PASS" } else { "FAIL" });
            pass
        }
        Err(e) => {
            println!("criterion {n}: FAIL error: {e:#} ({secs:.1}s)");
            false
        }
    }
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temporary directory");
    let root = dir.path();
    let mut all = true;

    let t = Instant::now();
    all &= report(1, t, criterion_1());
    let t = Instant::now();
    all &= report(2, t, criterion_2());
    let t = Instant::now();
    all &= report(3, t, criterion_3());
    let t = Instant::now();
    all &= report(4, t, criterion_4());
    let t = Instant::now();
    all &= report(5, t, criterion_5(root));

    let t = Instant::now();
    match run_pilot(root) {
        Ok(p) => {
            all &= report(6, t, criterion_6(&p));
            all &= report(7, t, criterion_7(&p));
            all &= report(8, t, criterion_8(&p));
        }
        Err(e) => {
            for n in 6..=8 {
                all &= report(n, t, Err(anyhow::anyhow!("{e:#}")));
            }
        }
    }

    let t = Instant::now();
    all &= report(9, t, criterion_9(root));
    let t = Instant::now();
    all &= report(10, t, criterion_10(root));

    if all {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED");
        ExitCode::FAILURE
    }
}
