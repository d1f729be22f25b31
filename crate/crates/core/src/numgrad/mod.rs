//! Dense tensors and tape-based reverse-mode differentiation with support for
//! differentiating through a recorded gradient step.

mod check;
mod graph;
mod params;
mod tape;
mod tensor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use check::{max_relative_error, numeric_grad};
pub use graph::{forward, Activation, Dense, Graph};
pub use params::{ParamGrad, ParamSet, ParamVars};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("tensors of rank {rank} are not supported (max 2)")]
    Rank { rank: usize },
    #[error("shape {shape:?} has a zero dimension")]
    EmptyDimension { shape: Vec<usize> },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("expected a single-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("missing parameter `{name}`")]
    MissingParam { name: String },
    #[error("duplicate parameter `{name}`")]
    DuplicateParam { name: String },
    #[error("parameter sets are not congruent")]
    Incongruent,
}

/// How the outer gradient treats the inner update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiffOrder {
    /// The inner gradient is treated as a constant: d(theta')/d(theta) = I.
    First,
    /// Exact differentiation through the inner gradient.
    Second,
}

impl DiffOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            DiffOrder::First => "first",
            DiffOrder::Second => "second",
        }
    }
}

/// One gradient-descent step `p - lr * dloss/dp`, recorded on the tape.
///
/// With [`DiffOrder::Second`] the result stays connected to `params`; with
/// [`DiffOrder::First`] it is a fresh set of leaves.
pub fn recorded_step(
    tape: &Tape,
    params: &ParamVars,
    loss: Var,
    lr: f64,
    order: DiffOrder,
) -> Result<ParamVars, GradError> {
    match order {
        DiffOrder::Second => {
            let (grads, _) = params.grad_vars(tape, loss)?;
            params
                .iter()
                .map(|(name, p)| {
                    let g = grads.get(name)?;
                    let step = tape.scale(g, lr)?;
                    Ok((name.to_string(), tape.sub(p, step)?))
                })
                .collect()
        }
        DiffOrder::First => {
            let grads = params.grad_values(tape, loss)?.grads;
            let updated = params.values(tape).axpy(-lr, &grads)?;
            Ok(updated.bind(tape))
        }
    }
}

/// Result of [`grad_through_update`].
#[derive(Clone, Debug)]
pub struct UpdateGrad {
    /// Gradient of the outer loss with respect to the initial parameters.
    pub grad: ParamSet,
    pub outer_loss: f64,
    /// Parameters after the inner steps.
    pub adapted: ParamSet,
    pub order: DiffOrder,
    pub unreachable: Vec<String>,
}

/// Differentiates `outer(theta')` with respect to `theta`, where `theta'` is
/// reached from `theta` by `steps` gradient steps on `inner`.
pub fn grad_through_update<I, O>(
    theta: &ParamSet,
    lr: f64,
    steps: usize,
    order: DiffOrder,
    inner: I,
    outer: O,
) -> Result<UpdateGrad, GradError>
where
    I: Fn(&Tape, &ParamVars) -> Result<Var, GradError>,
    O: Fn(&Tape, &ParamVars) -> Result<Var, GradError>,
{
    let tape = Tape::new();
    let initial = theta.bind(&tape);
    let mut current = initial.clone();
    for _ in 0..steps {
        let loss = inner(&tape, &current)?;
        current = recorded_step(&tape, &current, loss, lr, order)?;
    }
    let loss = outer(&tape, &current)?;
    // first-order: the adapted leaves stand in for theta
    let wrt = match order {
        DiffOrder::Second => &initial,
        DiffOrder::First => &current,
    };
    let g = wrt.grad_values(&tape, loss)?;
    Ok(UpdateGrad {
        grad: g.grads,
        outer_loss: tape.item(loss),
        adapted: current.values(&tape),
        order,
        unreachable: g.unreachable,
    })
}
