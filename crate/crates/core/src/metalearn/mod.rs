//! MAML, the memory-imitation training loop, meta-testing, a fine-tuning
//! baseline and the ablation variants.

mod config;
mod learner;
mod metrics;

use thiserror::Error;

pub use config::{Ablation, MetaConfig, Method, OuterOptimizer};
pub use learner::{train, Learner, TargetSpec};
pub use metrics::{
    peak_gap, smooth, terminal_gap, window, EvalMetrics, Phase, RunMetrics, StepMetrics, TaskEval,
};

use crate::imitation::ImitationError;
use crate::memory::MemoryError;
use crate::nets::{BaseModel, HeadKind, NetError};
use crate::numgrad::{recorded_step, DiffOrder, GradError, ParamSet, Tape, Tensor};

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Imitation(#[from] ImitationError),
    #[error("task {task_id}: {source}")]
    Task {
        task_id: String,
        #[source]
        source: Box<MetaError>,
    },
}

impl MetaError {
    pub(crate) fn in_task(self, task_id: &str) -> Self {
        match self {
            e @ MetaError::Task { .. } => e,
            e => MetaError::Task {
                task_id: task_id.to_string(),
                source: Box::new(e),
            },
        }
    }
}

/// Support-set training loss of the base model: cross-entropy on logits for
/// labels, mean squared error for vectors. The vector head is conditioned on
/// zeros.
fn support_loss(
    tape: &Tape,
    model: &BaseModel,
    params: &crate::numgrad::ParamVars,
    inputs: crate::numgrad::Var,
    targets: crate::numgrad::Var,
) -> Result<crate::numgrad::Var, MetaError> {
    match model.head {
        HeadKind::Label { .. } => {
            let logits = model.record(tape, params, inputs, None)?;
            Ok(tape.softmax_cross_entropy(logits, targets)?)
        }
        HeadKind::Vector { value_dim, .. } => {
            let rows = tape.shape(inputs)[0];
            let cond = tape.leaf(Tensor::zeros(&[rows, value_dim]));
            let pred = model.record(tape, params, inputs, Some(cond))?;
            Ok(tape.mse(pred, targets)?)
        }
    }
}

/// `steps` gradient steps of size `lr` on the support loss.
///
/// `targets` holds one-hot rows for the label head and target rows for the
/// vector head.
pub fn inner_adapt(
    model: &BaseModel,
    theta: &ParamSet,
    inputs: &Tensor,
    targets: &Tensor,
    lr: f64,
    steps: usize,
) -> Result<ParamSet, MetaError> {
    if inputs.rows() == 0 {
        return Err(MetaError::Data("empty support set".into()));
    }
    let tape = Tape::new();
    let x = tape.leaf(inputs.clone());
    let y = tape.leaf(targets.clone());
    let base = tape.len();
    let mut current = theta.clone();
    for _ in 0..steps {
        let bound = current.bind(&tape);
        let loss = support_loss(&tape, model, &bound, x, y)?;
        current = recorded_step(&tape, &bound, loss, lr, DiffOrder::First)?.values(&tape);
        tape.rewind(base);
    }
    Ok(current)
}

/// Interpolates base-model probabilities with predicted values,
/// `beta * base + (1 - beta) * predicted`, for the label head. The vector
/// head consumes the predicted value inside the forward pass, so `base` is
/// returned unchanged.
pub fn combine_prediction(
    base: &Tensor,
    predicted: &Tensor,
    beta: f64,
    head: HeadKind,
) -> Result<Tensor, MetaError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(MetaError::Config(format!("beta must lie in [0, 1], got {beta}")));
    }
    match head {
        HeadKind::Vector { .. } => Ok(base.clone()),
        HeadKind::Label { .. } => {
            if base.shape() != predicted.shape() {
                return Err(GradError::Shape {
                    op: "combine_prediction",
                    left: base.shape().to_vec(),
                    right: predicted.shape().to_vec(),
                }
                .into());
            }
            let data = base
                .data()
                .iter()
                .zip(predicted.data())
                .map(|(b, p)| beta * b + (1.0 - beta) * p)
                .collect();
            Ok(Tensor::new(base.shape().to_vec(), data)?)
        }
    }
}
