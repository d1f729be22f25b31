//! The train, eval and sweep commands and the artifacts they write.
//!
//! Every CSV starts with `#` comment lines echoing the resolved experiment
//! configuration, followed by a header row.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use memiml::checkpoint::{learner_checkpoint, learner_from_checkpoint, Checkpoint};
use memiml::metalearn::{self, EvalMetrics, Learner, Phase, RunMetrics, StepMetrics, TargetSpec};
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::data;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.txt";
pub const EVAL_FILE: &str = "eval.csv";
pub const SUMMARY_FILE: &str = "eval_summary.txt";
pub const SWEEP_FILE: &str = "sweep.csv";

pub const METRICS_HEADER: [&str; 7] = [
    "step",
    "phase",
    "pre_update_loss",
    "post_update_loss",
    "gap",
    "metric",
    "seed",
];
pub const EVAL_HEADER: [&str; 6] = [
    "task_id",
    "pre_update_loss",
    "post_update_loss",
    "gap",
    "metric",
    "seed",
];
pub const SWEEP_HEADER: [&str; 9] = [
    "axis",
    "value",
    "seeds",
    "status",
    "pre_update_loss",
    "post_update_loss",
    "gap",
    "metric",
    "error",
];

/// Opens `path` for writing and emits the config comment block.
fn csv_with_echo(path: &Path, cfg: &ExperimentConfig, extra: &[String]) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for line in cfg.echo_lines().iter().chain(extra) {
        writeln!(w, "# {line}")?;
    }
    Ok(csv::Writer::from_writer(w))
}

fn write_row(w: &mut csv::Writer<impl Write>, row: &StepMetrics, seed: u64) -> Result<()> {
    w.write_record([
        row.step.to_string(),
        row.phase.as_str().to_string(),
        row.pre_update_loss.to_string(),
        row.post_update_loss.to_string(),
        row.gap.to_string(),
        row.metric.to_string(),
        seed.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

fn metric_name(target: TargetSpec) -> &'static str {
    match target {
        TargetSpec::Labels { .. } => "accuracy",
        TargetSpec::Vectors { .. } => "query mse",
    }
}

pub struct TrainOutcome {
    pub dir: PathBuf,
    pub metrics: RunMetrics,
    pub learner: Learner,
}

/// Meta-trains per `cfg`, writing `config.txt`, `metrics.csv` (one row per
/// outer step plus one per evaluation, flushed as produced) and
/// `checkpoint.bin` into the run directory.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), cfg.render())?;
    let mut data = data::load(cfg)?;
    let mut learner = Learner::new(cfg.meta.clone(), data.input_dim, data.target)?;

    let mut csv = csv_with_echo(&dir.join(METRICS_FILE), cfg, &[])?;
    csv.write_record(METRICS_HEADER)?;
    csv.flush()?;
    let seed = cfg.meta.seed;
    let mut io_error = None;
    let result = metalearn::train(
        &mut learner,
        &mut *data.train,
        &data.test,
        cfg.run.steps,
        cfg.run.eval_every,
        cfg.to_json(),
        |row| {
            if row.phase == Phase::Test {
                log::info!(
                    "step {}: test gap {:.4}, {} {:.4}",
                    row.step,
                    row.gap,
                    metric_name(data.target),
                    row.metric
                );
            }
            if io_error.is_none() {
                io_error = write_row(&mut csv, row, seed).err();
            }
        },
    );
    if let Some(e) = io_error {
        return Err(e.context("writing metrics"));
    }
    let metrics = result.context("meta-training failed")?;

    let metadata = json!({
        "config": cfg.to_json(),
        "seed": seed,
        "step": learner.step(),
        "input_dim": data.input_dim,
        "target": data.target,
    });
    learner_checkpoint(&learner, metadata)
        .save(dir.join(CHECKPOINT_FILE))
        .context("writing checkpoint")?;
    Ok(TrainOutcome { dir, metrics, learner })
}

pub struct EvalReport {
    pub metrics: EvalMetrics,
    pub target: TargetSpec,
    pub summary: String,
}

fn check_metadata(ckpt: &Checkpoint, input_dim: usize, target: TargetSpec) -> Result<usize> {
    let meta = &ckpt.metadata;
    if let Some(d) = meta.get("input_dim").and_then(Value::as_u64) {
        if d as usize != input_dim {
            bail!("checkpoint was trained on input dimension {d}, the config gives {input_dim}");
        }
    }
    if let Some(t) = meta.get("target") {
        let stored: TargetSpec =
            serde_json::from_value(t.clone()).context("checkpoint metadata has a malformed target")?;
        if stored != target {
            bail!("checkpoint target {stored:?} does not match the config's {target:?}");
        }
    }
    Ok(meta.get("step").and_then(Value::as_u64).unwrap_or(0) as usize)
}

/// Meta-tests the checkpoint on the config's test episodes and writes
/// `eval.csv` (one row per task, then a `mean` row) and `eval_summary.txt`
/// into the run directory. The checkpoint is only read.
pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let data = data::load(cfg)?;
    if data.test.is_empty() {
        bail!("no test episodes to evaluate on");
    }
    let ckpt = Checkpoint::load(checkpoint)
        .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let step = check_metadata(&ckpt, data.input_dim, data.target)?;
    let learner = learner_from_checkpoint(&ckpt, cfg.meta.clone(), data.input_dim, data.target, step)
        .context("checkpoint does not fit the configured model")?;
    let metrics = learner.meta_test(&data.test)?;

    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    let seed = cfg.meta.seed.to_string();
    let mut csv = csv_with_echo(&dir.join(EVAL_FILE), cfg, &[format!("checkpoint_step = {step}")])?;
    csv.write_record(EVAL_HEADER)?;
    for t in &metrics.tasks {
        csv.write_record([
            t.task_id.clone(),
            t.pre_update_loss.to_string(),
            t.post_update_loss.to_string(),
            (t.pre_update_loss - t.post_update_loss).to_string(),
            t.metric.to_string(),
            seed.clone(),
        ])?;
    }
    let mean = metrics.row(step, Phase::Test);
    csv.write_record([
        "mean".to_string(),
        mean.pre_update_loss.to_string(),
        mean.post_update_loss.to_string(),
        mean.gap.to_string(),
        mean.metric.to_string(),
        seed,
    ])?;
    csv.flush()?;

    let mut summary = String::new();
    writeln!(summary, "checkpoint step {step}, {} test tasks, seed {}", metrics.tasks.len(), cfg.meta.seed)?;
    writeln!(summary, "pre-update loss  {:.6}", mean.pre_update_loss)?;
    writeln!(summary, "post-update loss {:.6}", mean.post_update_loss)?;
    writeln!(summary, "gap              {:.6}", mean.gap)?;
    writeln!(summary, "{:<16} {:.6}", metric_name(data.target), mean.metric)?;
    fs::write(dir.join(SUMMARY_FILE), &summary)?;
    Ok(EvalReport {
        metrics,
        target: data.target,
        summary,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepAxis {
    #[value(name = "store_ratio")]
    StoreRatio,
    #[value(name = "n_neighbors")]
    NNeighbors,
    #[value(name = "beta")]
    Beta,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::StoreRatio => "store_ratio",
            SweepAxis::NNeighbors => "n_neighbors",
            SweepAxis::Beta => "beta",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::StoreRatio => "meta.store_ratio",
            SweepAxis::NNeighbors => "meta.n_neighbors",
            SweepAxis::Beta => "meta.beta",
        }
    }
}

/// One value of a sweep, averaged over its seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    /// Mean test-phase row over seeds, or the first failure.
    pub result: Result<StepMetrics, String>,
}

fn run_cell(cfg: &ExperimentConfig) -> Result<StepMetrics> {
    let outcome = train(cfg)?;
    let report = eval(cfg, &outcome.dir.join(CHECKPOINT_FILE))?;
    Ok(report.metrics.row(outcome.learner.step(), Phase::Test))
}

fn mean_rows(rows: &[StepMetrics]) -> StepMetrics {
    let k = rows.len() as f64;
    let mean = |f: fn(&StepMetrics) -> f64| rows.iter().map(f).sum::<f64>() / k;
    StepMetrics::new(
        rows[0].step,
        Phase::Test,
        mean(|r| r.pre_update_loss),
        mean(|r| r.post_update_loss),
        mean(|r| r.metric),
    )
}

/// Runs train then eval for every value and seed. Cell `value`, seed `s`
/// lives in `<run dir>/<axis>-<value>/seed-<s>`. Failing cells are recorded
/// in `sweep.csv` and the sweep moves on.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        bail!("a sweep needs at least one value");
    }
    let seeds = if seeds.is_empty() { vec![cfg.meta.seed] } else { seeds.to_vec() };
    let mut cells = Vec::with_capacity(values.len());
    for v in values {
        let mut c = cfg.clone();
        c.set(axis.key(), v)
            .and_then(|_| c.validate())
            .with_context(|| format!("sweep value `{v}` is invalid for {}", axis.as_str()))?;
        cells.push(c);
    }
    let root = cfg.run_dir();
    fs::create_dir_all(&root)?;

    let mut rows = Vec::with_capacity(values.len());
    for (v, cell) in values.iter().zip(cells) {
        let mut results = Vec::with_capacity(seeds.len());
        let mut failure = None;
        for &seed in &seeds {
            let mut c = cell.clone();
            c.set("seed", &seed.to_string())?;
            c.run.out = root.join(format!("{}-{v}", axis.as_str()));
            c.run.name = format!("seed-{seed}");
            match run_cell(&c) {
                Ok(r) => results.push(r),
                Err(e) => {
                    log::error!("{} = {v}, seed {seed}: {e:#}", axis.as_str());
                    failure = Some(format!("seed {seed}: {e:#}"));
                    break;
                }
            }
        }
        rows.push(SweepRow {
            value: v.trim().to_string(),
            result: match failure {
                Some(msg) => Err(msg),
                None => Ok(mean_rows(&results)),
            },
        });
    }

    let seed_list = seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
    let extra = [format!("sweep.axis = {}", axis.as_str()), format!("sweep.seeds = {seed_list}")];
    let mut csv = csv_with_echo(&root.join(SWEEP_FILE), cfg, &extra)?;
    csv.write_record(SWEEP_HEADER)?;
    for row in &rows {
        let mut rec = vec![axis.as_str().to_string(), row.value.clone(), seed_list.clone()];
        match &row.result {
            Ok(m) => rec.extend([
                "ok".to_string(),
                m.pre_update_loss.to_string(),
                m.post_update_loss.to_string(),
                m.gap.to_string(),
                m.metric.to_string(),
                String::new(),
            ]),
            Err(e) => {
                rec.push("failed".to_string());
                rec.extend(std::iter::repeat_n(String::new(), 4));
                rec.push(e.clone());
            }
        }
        csv.write_record(rec)?;
    }
    csv.flush()?;
    Ok(rows)
}
