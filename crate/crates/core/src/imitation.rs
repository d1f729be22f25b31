//! Training of the value predictor: a global step shared across tasks and a
//! per-query local adaptation on retrieved memory slots.
//!
//! Everything here returns plain tensors and parameter sets. A predicted
//! value never carries a tape reference, so downstream losses cannot send
//! gradients back into the value predictor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{MemoryError, MemorySlot, Neighbor, TaskMemory};
use crate::nets::{NetError, ValuePredictor};
use crate::numgrad::{GradError, ParamSet, ParamVars, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImitationError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("no key-value pairs given")]
    EmptyBatch,
    #[error("non-finite loss at local adaptation step {step}")]
    NonFiniteLoss { step: usize },
}

impl From<GradError> for ImitationError {
    fn from(e: GradError) -> Self {
        ImitationError::Net(e.into())
    }
}

/// Proximal weight, number of steps and step size of local adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalAdaptConfig {
    pub gamma: f64,
    pub steps: usize,
    pub step_size: f64,
}

impl Default for LocalAdaptConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            steps: 5,
            step_size: 0.5,
        }
    }
}

/// Stacks rank-1 keys and values of slots into `[n, key_dim]` and
/// `[n, value_dim]` matrices.
pub fn stack_slots<'a>(slots: impl IntoIterator<Item = &'a MemorySlot>) -> Result<(Tensor, Tensor), ImitationError> {
    let mut keys = Vec::new();
    let mut values = Vec::new();
    let mut n = 0;
    let (mut kd, mut vd) = (0, 0);
    for s in slots {
        kd = s.key.numel();
        vd = s.value.numel();
        keys.extend_from_slice(s.key.data());
        values.extend_from_slice(s.value.data());
        n += 1;
    }
    if n == 0 {
        return Err(ImitationError::EmptyBatch);
    }
    Ok((
        Tensor::new(vec![n, kd], keys)?,
        Tensor::new(vec![n, vd], values)?,
    ))
}

/// Mean reconstruction loss of `omega` on a key/value batch.
pub fn rec_loss(vp: &ValuePredictor, omega: &ParamSet, keys: &Tensor, values: &Tensor) -> Result<f64, ImitationError> {
    let tape = Tape::new();
    let w = omega.bind(&tape);
    let k = tape.leaf(keys.clone());
    let v = tape.leaf(values.clone());
    Ok(tape.item(vp.rec_loss(&tape, &w, k, v)?))
}

/// One gradient step of size `step_size` on the mean reconstruction loss.
pub fn global_step(
    vp: &ValuePredictor,
    omega: &ParamSet,
    keys: &Tensor,
    values: &Tensor,
    step_size: f64,
) -> Result<ParamSet, ImitationError> {
    if keys.rows() == 0 {
        return Err(ImitationError::EmptyBatch);
    }
    let tape = Tape::new();
    let w = omega.bind(&tape);
    let k = tape.leaf(keys.clone());
    let v = tape.leaf(values.clone());
    let loss = vp.rec_loss(&tape, &w, k, v)?;
    let grads = w.grad_values(&tape, loss)?.grads;
    Ok(omega.axpy(-step_size, &grads)?)
}

fn record_local_loss(
    tape: &Tape,
    vp: &ValuePredictor,
    anchor: &ParamVars,
    current: &ParamVars,
    keys: Var,
    values: Var,
    gamma: f64,
) -> Result<Var, ImitationError> {
    let rec = vp.rec_loss(tape, current, keys, values)?;
    if gamma == 0.0 {
        return Ok(rec);
    }
    let mut prox: Option<Var> = None;
    for (name, p) in current.iter() {
        let d = tape.sub(p, anchor.get(name)?)?;
        let sq = tape.sum_squares(d)?;
        prox = Some(match prox {
            None => sq,
            Some(acc) => tape.add(acc, sq)?,
        });
    }
    let Some(prox) = prox else { return Ok(rec) };
    let prox = tape.scale(prox, gamma)?;
    Ok(tape.add(prox, rec)?)
}

/// `gamma * ||params - anchor||^2 + mean reconstruction loss`.
pub fn local_loss(
    vp: &ValuePredictor,
    anchor: &ParamSet,
    params: &ParamSet,
    keys: &Tensor,
    values: &Tensor,
    gamma: f64,
) -> Result<f64, ImitationError> {
    let tape = Tape::new();
    let anchor = anchor.bind(&tape);
    let w = params.bind(&tape);
    let k = tape.leaf(keys.clone());
    let v = tape.leaf(values.clone());
    Ok(tape.item(record_local_loss(&tape, vp, &anchor, &w, k, v, gamma)?))
}

/// Runs `cfg.steps` gradient steps on the local loss starting from `omega`
/// and returns the adapted parameters. `omega` itself is not touched.
pub fn local_adapt(
    vp: &ValuePredictor,
    omega: &ParamSet,
    keys: &Tensor,
    values: &Tensor,
    cfg: &LocalAdaptConfig,
) -> Result<ParamSet, ImitationError> {
    if keys.rows() == 0 {
        return Err(ImitationError::EmptyBatch);
    }
    let mut current = omega.clone();
    let tape = Tape::new();
    let k = tape.leaf(keys.clone());
    let v = tape.leaf(values.clone());
    let anchor = omega.bind(&tape);
    let base = tape.len();
    for step in 0..cfg.steps {
        let w = current.bind(&tape);
        let loss = record_local_loss(&tape, vp, &anchor, &w, k, v, cfg.gamma)
            .map_err(|e| match e {
                ImitationError::Net(NetError::Grad(GradError::NonFinite { .. })) => {
                    ImitationError::NonFiniteLoss { step }
                }
                e => e,
            })?;
        let grads = w.grad_values(&tape, loss)?.grads;
        current = current.axpy(-cfg.step_size, &grads)?;
        if !current.is_finite() {
            return Err(ImitationError::NonFiniteLoss { step });
        }
        tape.rewind(base);
    }
    Ok(current)
}

/// Locally adapts on `neighbors` and predicts the value of `query_key`.
pub fn imitate_neighbors(
    vp: &ValuePredictor,
    omega: &ParamSet,
    query_key: &Tensor,
    neighbors: &[Neighbor<'_>],
    cfg: &LocalAdaptConfig,
) -> Result<Tensor, ImitationError> {
    let (keys, values) = stack_slots(neighbors.iter().map(|n| n.slot))?;
    let adapted = local_adapt(vp, omega, &keys, &values, cfg)?;
    Ok(vp.predict(&adapted, query_key)?)
}

/// Reads the `n_neighbors` nearest slots, adapts locally and predicts.
pub fn imitate(
    vp: &ValuePredictor,
    omega: &ParamSet,
    query_key: &Tensor,
    memory: &TaskMemory,
    n_neighbors: usize,
    cfg: &LocalAdaptConfig,
) -> Result<Tensor, ImitationError> {
    let neighbors = memory.read(query_key, n_neighbors)?;
    imitate_neighbors(vp, omega, query_key, &neighbors, cfg)
}

/// Mean of the retrieved values; stands in for the value predictor when it is
/// ablated.
pub fn mean_value(neighbors: &[Neighbor<'_>]) -> Result<Tensor, ImitationError> {
    let first = neighbors.first().ok_or(ImitationError::EmptyBatch)?;
    let mut acc = vec![0.0; first.slot.value.numel()];
    for n in neighbors {
        for (a, &v) in acc.iter_mut().zip(n.slot.value.data()) {
            *a += v;
        }
    }
    let k = neighbors.len() as f64;
    Ok(Tensor::new(
        first.slot.value.shape().to_vec(),
        acc.into_iter().map(|a| a / k).collect(),
    )?)
}
