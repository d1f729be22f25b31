//! Flat `key = value` experiment configuration with dotted namespaces.
//!
//! Sources are applied in order (defaults, then a file, then command-line
//! overrides), and every key must be known.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use memiml::metalearn::{Ablation, MetaConfig, Method, OuterOptimizer};
use memiml::tasks::{Family, TaskFamilySpec};
use memiml::DiffOrder;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MEMIML_OUT";
const DEFAULT_OUT: &str = "runs";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub out: PathBuf,
    pub steps: usize,
    /// Evaluate on the test tasks every this many outer steps; 0 disables.
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub meta: MetaConfig,
    pub task: TaskFamilySpec,
    /// Episode files replacing the synthetic family when set.
    pub train_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let out = std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        Self {
            meta: MetaConfig::default(),
            task: TaskFamilySpec::default(),
            train_file: None,
            test_file: None,
            run: RunConfig {
                name: "run".into(),
                out,
                steps: 1000,
                eval_every: 100,
            },
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("invalid value `{value}` for {key}: {e}"))
}

fn on_off(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => bail!("invalid value `{value}` for {key}: expected on or off"),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

const OUTPUT_KEYS: [&str; 2] = ["run.name", "run.out"];

/// All keys in rendering order.
pub const KEYS: &[&str] = &[
    "seed",
    "run.name",
    "run.out",
    "run.steps",
    "run.eval_every",
    "task.family",
    "task.n_train_tasks",
    "task.n_test_tasks",
    "task.shots",
    "task.queries",
    "task.leak",
    "task.noise",
    "task.train_file",
    "task.test_file",
    "meta.method",
    "meta.inner_lr",
    "meta.inner_steps",
    "meta.outer_lr",
    "meta.optimizer",
    "meta.global_lr",
    "meta.n_neighbors",
    "meta.store_ratio",
    "meta.beta",
    "meta.second_order",
    "meta.ablation",
    "meta.meta_batch",
    "meta.hidden",
    "meta.key_dim",
    "meta.vp_hidden",
    "local.gamma",
    "local.steps",
    "local.step_size",
];

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.meta;
        match key {
            "seed" => {
                let seed = parse(key, value)?;
                m.seed = seed;
                self.task.seed = seed;
            }
            "run.name" => self.run.name = value.to_string(),
            "run.out" => self.run.out = PathBuf::from(value),
            "run.steps" => self.run.steps = parse(key, value)?,
            "run.eval_every" => self.run.eval_every = parse(key, value)?,
            "task.family" => {
                self.task.family =
                    Family::parse(value).ok_or_else(|| anyhow!("unknown task family `{value}`"))?
            }
            "task.n_train_tasks" => self.task.n_train_tasks = parse(key, value)?,
            "task.n_test_tasks" => self.task.n_test_tasks = parse(key, value)?,
            "task.shots" => self.task.shots = parse(key, value)?,
            "task.queries" => self.task.queries = parse(key, value)?,
            "task.leak" => self.task.leak = parse(key, value)?,
            "task.noise" => self.task.noise = parse(key, value)?,
            "task.train_file" => self.train_file = optional_path(value),
            "task.test_file" => self.test_file = optional_path(value),
            "meta.method" => {
                m.method = Method::parse(value).ok_or_else(|| anyhow!("unknown method `{value}`"))?
            }
            "meta.inner_lr" => m.inner_lr = parse(key, value)?,
            "meta.inner_steps" => m.inner_steps = parse(key, value)?,
            "meta.outer_lr" => m.outer_lr = parse(key, value)?,
            "meta.optimizer" => {
                m.optimizer = OuterOptimizer::parse(value)
                    .ok_or_else(|| anyhow!("unknown optimizer `{value}`"))?
            }
            "meta.global_lr" => m.global_lr = parse(key, value)?,
            "meta.n_neighbors" => m.n_neighbors = parse(key, value)?,
            "meta.store_ratio" => m.store_ratio = parse(key, value)?,
            "meta.beta" => m.beta = parse(key, value)?,
            "meta.second_order" => {
                m.order = if on_off(key, value)? {
                    DiffOrder::Second
                } else {
                    DiffOrder::First
                }
            }
            "meta.ablation" => {
                m.ablation =
                    Ablation::parse(value).ok_or_else(|| anyhow!("unknown ablation `{value}`"))?
            }
            "meta.meta_batch" => m.meta_batch = parse(key, value)?,
            "meta.hidden" => m.hidden = parse(key, value)?,
            "meta.key_dim" => m.key_dim = parse(key, value)?,
            "meta.vp_hidden" => m.vp_hidden = parse(key, value)?,
            "local.gamma" => m.local.gamma = parse(key, value)?,
            "local.steps" => m.local.steps = parse(key, value)?,
            "local.step_size" => m.local.step_size = parse(key, value)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.meta;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "seed" => m.seed.to_string(),
            "run.name" => self.run.name.clone(),
            "run.out" => self.run.out.display().to_string(),
            "run.steps" => self.run.steps.to_string(),
            "run.eval_every" => self.run.eval_every.to_string(),
            "task.family" => self.task.family.as_str().to_string(),
            "task.n_train_tasks" => self.task.n_train_tasks.to_string(),
            "task.n_test_tasks" => self.task.n_test_tasks.to_string(),
            "task.shots" => self.task.shots.to_string(),
            "task.queries" => self.task.queries.to_string(),
            "task.leak" => self.task.leak.to_string(),
            "task.noise" => self.task.noise.to_string(),
            "task.train_file" => path(&self.train_file),
            "task.test_file" => path(&self.test_file),
            "meta.method" => m.method.as_str().to_string(),
            "meta.inner_lr" => m.inner_lr.to_string(),
            "meta.inner_steps" => m.inner_steps.to_string(),
            "meta.outer_lr" => m.outer_lr.to_string(),
            "meta.optimizer" => m.optimizer.as_str().to_string(),
            "meta.global_lr" => m.global_lr.to_string(),
            "meta.n_neighbors" => m.n_neighbors.to_string(),
            "meta.store_ratio" => m.store_ratio.to_string(),
            "meta.beta" => m.beta.to_string(),
            "meta.second_order" => match m.order {
                DiffOrder::Second => "on".into(),
                DiffOrder::First => "off".into(),
            },
            "meta.ablation" => m.ablation.as_str().to_string(),
            "meta.meta_batch" => m.meta_batch.to_string(),
            "meta.hidden" => m.hidden.to_string(),
            "meta.key_dim" => m.key_dim.to_string(),
            "meta.vp_hidden" => m.vp_hidden.to_string(),
            "local.gamma" => m.local.gamma.to_string(),
            "local.steps" => m.local.steps.to_string(),
            "local.step_size" => m.local.step_size.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`", i + 1))?;
            self.set(key.trim(), value)
                .with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{kv}` is not of the form key=value"))?;
        self.set(key.trim(), value)
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        if self.train_file.is_none() {
            self.task.validate()?;
        }
        if self.run.name.is_empty() || self.run.name.contains(['/', '\\']) {
            bail!("run.name must be a nonempty plain file name");
        }
        Ok(())
    }

    /// Resolved configuration, one `key = value` per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = self.get(key).expect("known key");
            writeln!(out, "{key} = {value}").expect("write to string");
        }
        out
    }

    /// Keys that describe the experiment, leaving out where its output goes,
    /// so that equal experiments write equal artifacts.
    pub fn echo_keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().copied().filter(|k| !OUTPUT_KEYS.contains(k))
    }

    pub fn echo_lines(&self) -> Vec<String> {
        Self::echo_keys()
            .map(|k| format!("{k} = {}", self.get(k).expect("known key")))
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        Self::echo_keys()
            .map(|k| (k.to_string(), serde_json::Value::String(self.get(k).expect("known key"))))
            .collect::<serde_json::Map<_, _>>()
            .into()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run.out.join(&self.run.name)
    }
}
