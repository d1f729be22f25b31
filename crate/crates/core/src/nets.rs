//! The frozen key network, the base model with its two heads, and the
//! two-layer value predictor.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numgrad::{Activation, Dense, GradError, Graph, ParamSet, ParamVars, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("expected input width {expected}, got {got}")]
    InputDim { expected: usize, got: usize },
    #[error("the label head takes no conditioning value; interpolation happens after the forward pass")]
    UnexpectedConditioning,
    #[error("the vector head requires a conditioning value")]
    MissingConditioning,
}

/// What a memory value is: a one-hot class label or a real vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ValueKind {
    Label,
    Vector,
}

/// Output head of the base model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadKind {
    /// Class probabilities; the memory prediction is interpolated afterwards.
    Label { classes: usize },
    /// Real-valued targets; the predicted value is concatenated with the
    /// encoder output before the final linear map.
    Vector { target_dim: usize, value_dim: usize },
}

impl HeadKind {
    pub fn value_kind(self) -> ValueKind {
        match self {
            HeadKind::Label { .. } => ValueKind::Label,
            HeadKind::Vector { .. } => ValueKind::Vector,
        }
    }

    pub fn output_dim(self) -> usize {
        match self {
            HeadKind::Label { classes } => classes,
            HeadKind::Vector { target_dim, .. } => target_dim,
        }
    }

    pub fn value_dim(self) -> usize {
        match self {
            HeadKind::Label { classes } => classes,
            HeadKind::Vector { value_dim, .. } => value_dim,
        }
    }
}

fn check_width(t: &Tensor, expected: usize) -> Result<(), NetError> {
    if t.cols() != expected {
        return Err(NetError::InputDim {
            expected,
            got: t.cols(),
        });
    }
    Ok(())
}

fn gaussian(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

fn dense_params(
    params: &mut ParamSet,
    rng: &mut impl Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
) {
    params
        .insert(format!("{prefix}.w"), gaussian(rng, &[fan_in, fan_out], std))
        .expect("fresh name");
    params
        .insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
        .expect("fresh name");
}

/// Frozen encoder `tanh(x W + b)` mapping a sample input to its key.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyNetwork {
    params: ParamSet,
    input_dim: usize,
    key_dim: usize,
}

impl KeyNetwork {
    /// Weights and bias drawn from `N(0, 1/input_dim)`.
    pub fn new(input_dim: usize, key_dim: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / input_dim as f64).sqrt();
        let params = ParamSet::new()
            .with("key.w", gaussian(rng, &[input_dim, key_dim], std))
            .with("key.b", gaussian(rng, &[key_dim], std));
        Self {
            params,
            input_dim,
            key_dim,
        }
    }

    pub fn from_params(weight: Tensor, bias: Tensor) -> Result<Self, NetError> {
        let (input_dim, key_dim) = weight.dims2();
        if weight.rank() != 2 || bias.shape() != [key_dim] {
            return Err(GradError::Shape {
                op: "key network",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            }
            .into());
        }
        let params = ParamSet::new().with("key.w", weight).with("key.b", bias);
        Ok(Self {
            params,
            input_dim,
            key_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Keys for a `[m, input_dim]` batch, as `[m, key_dim]`.
    pub fn encode_batch(&self, inputs: &Tensor) -> Result<Tensor, NetError> {
        check_width(inputs, self.input_dim)?;
        let w = self.params.require("key.w")?;
        let b = self.params.require("key.b")?;
        let (m, k) = (inputs.rows(), self.key_dim);
        let wd = w.data();
        let mut out = Vec::with_capacity(m * k);
        for i in 0..m {
            let x = inputs.row(i);
            for j in 0..k {
                let mut acc = b.data()[j];
                for (p, &xv) in x.iter().enumerate() {
                    acc += xv * wd[p * k + j];
                }
                out.push(acc.tanh());
            }
        }
        Ok(Tensor::new(vec![m, k], out)?)
    }

    /// Key of a single input, as a rank-1 `[key_dim]` tensor.
    pub fn encode(&self, input: &Tensor) -> Result<Tensor, NetError> {
        if input.numel() != self.input_dim {
            return Err(NetError::InputDim {
                expected: self.input_dim,
                got: input.numel(),
            });
        }
        let row = input.reshape(vec![1, self.input_dim])?;
        Ok(self.encode_batch(&row)?.reshape(vec![self.key_dim])?)
    }
}

/// The model being meta-learned: a two-layer relu encoder followed by either
/// a linear classifier or a linear map from `[value; encoding]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseModel {
    pub head: HeadKind,
    pub input_dim: usize,
    pub hidden: usize,
}

impl BaseModel {
    pub fn new(head: HeadKind, input_dim: usize, hidden: usize) -> Self {
        Self {
            head,
            input_dim,
            hidden,
        }
    }

    fn encoder(&self) -> Graph {
        Graph::new(vec![Dense::new("enc1", Activation::Relu), Dense::new("enc2", Activation::Relu)])
    }

    fn out_layer() -> Dense {
        Dense::new("out", Activation::Identity)
    }

    fn out_fan_in(&self) -> usize {
        match self.head {
            HeadKind::Label { .. } => self.hidden,
            HeadKind::Vector { value_dim, .. } => value_dim + self.hidden,
        }
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> ParamSet {
        let mut p = ParamSet::new();
        let h = self.hidden;
        dense_params(&mut p, rng, "enc1", self.input_dim, h, (2.0 / self.input_dim as f64).sqrt());
        dense_params(&mut p, rng, "enc2", h, h, (2.0 / h as f64).sqrt());
        let fan_in = self.out_fan_in();
        dense_params(&mut p, rng, "out", fan_in, self.head.output_dim(), (1.0 / fan_in as f64).sqrt());
        p
    }

    /// Zero-filled parameters of the right shapes.
    pub fn zero_params(&self) -> ParamSet {
        use rand::SeedableRng;
        self.init_params(&mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).zeros_like()
    }

    /// Records the forward pass. Returns logits for the label head and the
    /// prediction for the vector head.
    pub fn record(
        &self,
        tape: &Tape,
        params: &ParamVars,
        input: Var,
        conditioned: Option<Var>,
    ) -> Result<Var, NetError> {
        let h = self.encoder().record(tape, params, input)?;
        let features = match (self.head, conditioned) {
            (HeadKind::Label { .. }, None) => h,
            (HeadKind::Label { .. }, Some(_)) => return Err(NetError::UnexpectedConditioning),
            (HeadKind::Vector { .. }, Some(v)) => tape.concat_cols(v, h)?,
            (HeadKind::Vector { .. }, None) => return Err(NetError::MissingConditioning),
        };
        Ok(Self::out_layer().record(tape, params, features)?)
    }

    /// Class probabilities (label head) or predictions (vector head) for a
    /// `[m, input_dim]` batch.
    pub fn forward(
        &self,
        params: &ParamSet,
        input: &Tensor,
        conditioned: Option<&Tensor>,
    ) -> Result<Tensor, NetError> {
        check_width(input, self.input_dim)?;
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let x = tape.leaf(input.clone());
        let c = conditioned.map(|c| tape.leaf(c.clone()));
        let mut y = self.record(&tape, &bound, x, c)?;
        if let HeadKind::Label { .. } = self.head {
            y = tape.softmax(y)?;
        }
        Ok(tape.value(y))
    }
}

/// Two-layer network `g(k) = tanh(k W1 + b1) W2 + b2` from keys to values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValuePredictor {
    graph: Graph,
    kind: ValueKind,
    key_dim: usize,
    hidden: usize,
    value_dim: usize,
}

impl ValuePredictor {
    pub fn new(key_dim: usize, hidden: usize, value_dim: usize, kind: ValueKind) -> Self {
        Self {
            graph: Graph::new(vec![Dense::new("vp1", Activation::Tanh), Dense::new("vp2", Activation::Identity)]),
            kind,
            key_dim,
            hidden,
            value_dim,
        }
    }

    /// Single bias-free linear layer `g(k) = k W`; used for closed-form checks.
    pub fn linear(key_dim: usize, value_dim: usize, kind: ValueKind) -> Self {
        Self {
            graph: Graph::new(vec![Dense {
                weight: "vp.w".into(),
                bias: None,
                activation: Activation::Identity,
            }]),
            kind,
            key_dim,
            hidden: 0,
            value_dim,
        }
    }

    pub fn kind(&self) -> ValueKind {
        self.kind
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim
    }

    pub fn value_dim(&self) -> usize {
        self.value_dim
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> ParamSet {
        let mut p = ParamSet::new();
        if self.hidden == 0 {
            let std = (1.0 / self.key_dim as f64).sqrt();
            p.insert("vp.w", gaussian(rng, &[self.key_dim, self.value_dim], std))
                .expect("fresh name");
            return p;
        }
        dense_params(&mut p, rng, "vp1", self.key_dim, self.hidden, (1.0 / self.key_dim as f64).sqrt());
        dense_params(&mut p, rng, "vp2", self.hidden, self.value_dim, (1.0 / self.hidden as f64).sqrt());
        p
    }

    pub fn check(&self, params: &ParamSet) -> Result<(), NetError> {
        let out = self.graph.check(params, self.key_dim)?;
        if out != self.value_dim {
            return Err(NetError::InputDim {
                expected: self.value_dim,
                got: out,
            });
        }
        Ok(())
    }

    /// Raw outputs (logits for label values) for `[m, key_dim]` keys.
    pub fn record(&self, tape: &Tape, params: &ParamVars, keys: Var) -> Result<Var, NetError> {
        Ok(self.graph.record(tape, params, keys)?)
    }

    /// Mean reconstruction loss: cross-entropy against one-hot label values,
    /// mean squared error against vector values.
    pub fn rec_loss(
        &self,
        tape: &Tape,
        params: &ParamVars,
        keys: Var,
        values: Var,
    ) -> Result<Var, NetError> {
        let out = self.record(tape, params, keys)?;
        Ok(match self.kind {
            ValueKind::Label => tape.softmax_cross_entropy(out, values)?,
            ValueKind::Vector => tape.mse(out, values)?,
        })
    }

    /// Value estimates for a `[m, key_dim]` batch; probability rows for
    /// label values.
    pub fn predict_batch(&self, params: &ParamSet, keys: &Tensor) -> Result<Tensor, NetError> {
        check_width(keys, self.key_dim)?;
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let k = tape.leaf(keys.clone());
        let mut y = self.record(&tape, &bound, k)?;
        if self.kind == ValueKind::Label {
            y = tape.softmax(y)?;
        }
        Ok(tape.value(y))
    }

    /// Value estimate for one key, as a rank-1 `[value_dim]` tensor.
    pub fn predict(&self, params: &ParamSet, key: &Tensor) -> Result<Tensor, NetError> {
        if key.numel() != self.key_dim {
            return Err(NetError::InputDim {
                expected: self.key_dim,
                got: key.numel(),
            });
        }
        let row = key.reshape(vec![1, self.key_dim])?;
        Ok(self.predict_batch(params, &row)?.reshape(vec![self.value_dim])?)
    }
}

/// One-hot row for `label` out of `classes`.
pub fn one_hot(label: usize, classes: usize) -> Tensor {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    Tensor::vector(v)
}
