use serde::{Deserialize, Serialize};

use super::params::{ParamSet, ParamVars};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::GradError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn record(self, tape: &Tape, x: Var) -> Result<Var, GradError> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// `activation(x · W + b)` with `W` stored as `[in, out]` and `b` as `[out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: String,
    pub bias: Option<String>,
    pub activation: Activation,
}

impl Dense {
    pub fn new(prefix: &str, activation: Activation) -> Self {
        Self {
            weight: format!("{prefix}.w"),
            bias: Some(format!("{prefix}.b")),
            activation,
        }
    }

    pub fn record(&self, tape: &Tape, params: &ParamVars, x: Var) -> Result<Var, GradError> {
        let mut h = tape.matmul(x, params.get(&self.weight)?)?;
        if let Some(bias) = &self.bias {
            h = tape.add_bias(h, params.get(bias)?)?;
        }
        self.activation.record(tape, h)
    }
}

/// A sequential stack of dense layers. An empty stack is the identity map.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub layers: Vec<Dense>,
}

impl Graph {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(layers: Vec<Dense>) -> Self {
        Self { layers }
    }

    /// Input `[batch, in]` to output `[batch, out]`, recorded on `tape`.
    pub fn record(&self, tape: &Tape, params: &ParamVars, input: Var) -> Result<Var, GradError> {
        self.layers
            .iter()
            .try_fold(input, |x, layer| layer.record(tape, params, x))
    }

    /// Checks that `params` holds every tensor this graph reads, with chained
    /// shapes starting from `input_dim`. Returns the output width.
    pub fn check(&self, params: &ParamSet, input_dim: usize) -> Result<usize, GradError> {
        let mut width = input_dim;
        for layer in &self.layers {
            let w = params.require(&layer.weight)?;
            if w.rank() != 2 || w.rows() != width {
                return Err(GradError::Shape {
                    op: "dense",
                    left: vec![width],
                    right: w.shape().to_vec(),
                });
            }
            width = w.cols();
            if let Some(b) = &layer.bias {
                let b = params.require(b)?;
                if b.shape() != [width] {
                    return Err(GradError::Shape {
                        op: "dense bias",
                        left: vec![width],
                        right: b.shape().to_vec(),
                    });
                }
            }
        }
        Ok(width)
    }
}

/// Evaluates `graph` on `input` without keeping any record.
pub fn forward(graph: &Graph, params: &ParamSet, input: &Tensor) -> Result<Tensor, GradError> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let x = tape.leaf(input.clone());
    let y = graph.record(&tape, &bound, x)?;
    Ok(tape.value(y))
}
