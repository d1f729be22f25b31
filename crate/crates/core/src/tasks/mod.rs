//! Synthetic episodic task families and the line-delimited JSON episode format.
//!
//! Both families are non-mutually-exclusive at `leak = 0`: the input alone
//! reveals which training task a sample came from, so a model can solve every
//! training task without looking at the support set.

mod generate;
mod io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numgrad::Tensor;

pub use generate::{gen_nme_classify, gen_nme_sine, EpisodeStream, TaskDef, TaskFamily, SINE_RANGE};
pub use io::{load_episodes, save_episodes, write_episodes};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Dim { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    NmeSine,
    NmeClassify,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::NmeSine => "nme-sine",
            Family::NmeClassify => "nme-classify",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "nme-sine" => Some(Family::NmeSine),
            "nme-classify" => Some(Family::NmeClassify),
            _ => None,
        }
    }

    pub fn input_dim(self) -> usize {
        match self {
            Family::NmeSine => 1,
            Family::NmeClassify => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFamilySpec {
    pub family: Family,
    pub n_train_tasks: usize,
    pub n_test_tasks: usize,
    /// Support-set size.
    pub shots: usize,
    /// Query-set size.
    pub queries: usize,
    pub leak: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for TaskFamilySpec {
    fn default() -> Self {
        Self {
            family: Family::NmeClassify,
            n_train_tasks: 200,
            n_test_tasks: 20,
            shots: 5,
            queries: 10,
            leak: 0.0,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl TaskFamilySpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |m: &str| Err(TaskError::InvalidSpec(m.to_string()));
        if self.shots == 0 {
            return bad("shots must be at least 1");
        }
        if self.queries == 0 {
            return bad("queries must be at least 1");
        }
        if self.n_train_tasks == 0 || self.n_test_tasks == 0 {
            return bad("task counts must be positive");
        }
        if !(0.0..=1.0).contains(&self.leak) {
            return bad("leak must lie in [0, 1]");
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise must be finite and nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Label(usize),
    Vector(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Target,
}

/// Targets of a set of samples, stacked.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetBatch {
    Labels(Vec<usize>),
    /// `[n, target_dim]`
    Vectors(Tensor),
}

impl TargetBatch {
    pub fn len(&self) -> usize {
        match self {
            TargetBatch::Labels(l) => l.len(),
            TargetBatch::Vectors(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub task_id: String,
    pub support: Vec<Sample>,
    pub query: Vec<Sample>,
}

fn stack_inputs(samples: &[Sample]) -> Tensor {
    let cols = samples[0].x.len();
    let data = samples.iter().flat_map(|s| s.x.iter().copied()).collect();
    Tensor::matrix(samples.len(), cols, data)
}

fn stack_targets(samples: &[Sample]) -> TargetBatch {
    match &samples[0].y {
        Target::Label(_) => TargetBatch::Labels(
            samples
                .iter()
                .map(|s| match s.y {
                    Target::Label(l) => l,
                    Target::Vector(_) => panic!("mixed target kinds in one episode"),
                })
                .collect(),
        ),
        Target::Vector(v) => {
            let data = samples
                .iter()
                .flat_map(|s| match &s.y {
                    Target::Vector(v) => v.iter().copied(),
                    Target::Label(_) => panic!("mixed target kinds in one episode"),
                })
                .collect();
            TargetBatch::Vectors(Tensor::matrix(samples.len(), v.len(), data))
        }
    }
}

impl Episode {
    /// `[shots, input_dim]`
    pub fn support_inputs(&self) -> Tensor {
        stack_inputs(&self.support)
    }

    /// `[queries, input_dim]`
    pub fn query_inputs(&self) -> Tensor {
        stack_inputs(&self.query)
    }

    pub fn support_targets(&self) -> TargetBatch {
        stack_targets(&self.support)
    }

    pub fn query_targets(&self) -> TargetBatch {
        stack_targets(&self.query)
    }

    pub fn input_dim(&self) -> usize {
        self.support[0].x.len()
    }
}
