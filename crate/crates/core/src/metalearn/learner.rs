use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{EvalMetrics, Phase, RunMetrics, StepMetrics, TaskEval};
use super::{support_loss, Ablation, MetaConfig, MetaError, Method, OuterOptimizer};
use crate::imitation::{global_step, imitate_neighbors, mean_value};
use crate::memory::{capacity_for, MemorySlot, TaskMemory};
use crate::nets::{one_hot, BaseModel, HeadKind, KeyNetwork, ValuePredictor};
use crate::numgrad::{recorded_step, DiffOrder, ParamSet, ParamVars, Tape, Tensor, Var};
use crate::tasks::{Episode, Target, TargetBatch};

const STREAM_THETA: u64 = 10;
const STREAM_OMEGA: u64 = 11;
const STREAM_KEY: u64 = 12;
const STREAM_VALUE: u64 = 13;
const STREAM_TRAIN_READS: u64 = 1 << 40;
const STREAM_TEST_READS: u64 = 1 << 41;

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Kind of targets the learner is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetSpec {
    Labels { classes: usize },
    Vectors { dim: usize },
}

impl TargetSpec {
    fn head(self, key_dim: usize) -> HeadKind {
        match self {
            TargetSpec::Labels { classes } => HeadKind::Label { classes },
            TargetSpec::Vectors { dim } => HeadKind::Vector {
                target_dim: dim,
                value_dim: key_dim,
            },
        }
    }
}

#[derive(Clone, Debug)]
struct Adam {
    m: ParamSet,
    v: ParamSet,
    t: i32,
}

fn zip_map(a: &ParamSet, b: &ParamSet, f: impl Fn(f64, f64) -> f64) -> ParamSet {
    a.iter()
        .map(|(name, x)| {
            let y = b.get(name).expect("congruent parameter sets");
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            (
                name.to_string(),
                Tensor::new(x.shape().to_vec(), data).expect("same shape"),
            )
        })
        .collect()
}

impl Adam {
    fn new(like: &ParamSet) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    fn direction(&mut self, grad: &ParamSet) -> ParamSet {
        self.t += 1;
        self.m = zip_map(&self.m, grad, |m, g| ADAM_B1 * m + (1.0 - ADAM_B1) * g);
        self.v = zip_map(&self.v, grad, |v, g| ADAM_B2 * v + (1.0 - ADAM_B2) * g * g);
        let c1 = 1.0 - ADAM_B1.powi(self.t);
        let c2 = 1.0 - ADAM_B2.powi(self.t);
        zip_map(&self.m, &self.v, |m, v| (m / c1) / ((v / c2).sqrt() + ADAM_EPS))
    }
}

/// Stacked tensors of one episode.
struct TaskData {
    support_x: Tensor,
    /// One-hot rows or target rows.
    support_y: Tensor,
    query_x: Tensor,
    query_y: Tensor,
    query_labels: Option<Vec<usize>>,
}

struct TaskResult {
    grad: Option<ParamSet>,
    pre: f64,
    post: f64,
    metric: f64,
}

/// Meta-learner state: the initialization being learned, the value
/// predictor's global parameters, and the frozen networks producing keys and
/// vector values.
#[derive(Clone, Debug)]
pub struct Learner {
    cfg: MetaConfig,
    target: TargetSpec,
    model: BaseModel,
    key_net: KeyNetwork,
    value_net: Option<KeyNetwork>,
    vp: ValuePredictor,
    theta: ParamSet,
    omega: ParamSet,
    adam: Option<Adam>,
    step: usize,
}

impl Learner {
    /// Fresh learner with all parameters drawn from `cfg.seed`.
    pub fn new(cfg: MetaConfig, input_dim: usize, target: TargetSpec) -> Result<Self, MetaError> {
        cfg.validate()?;
        let seed = cfg.seed;
        let key_net = KeyNetwork::new(input_dim, cfg.key_dim, &mut rng_for(seed, STREAM_KEY));
        let value_net = match target {
            TargetSpec::Labels { .. } => None,
            TargetSpec::Vectors { dim } if dim == input_dim => Some(key_net.clone()),
            TargetSpec::Vectors { dim } => Some(KeyNetwork::new(
                dim,
                cfg.key_dim,
                &mut rng_for(seed, STREAM_VALUE),
            )),
        };
        let model = BaseModel::new(target.head(cfg.key_dim), input_dim, cfg.hidden);
        let vp = Self::build_value_predictor(&cfg, target);
        let theta = model.init_params(&mut rng_for(seed, STREAM_THETA));
        let omega = vp.init_params(&mut rng_for(seed, STREAM_OMEGA));
        Self::from_parts(cfg, target, input_dim, key_net, value_net, theta, omega, 0)
    }

    fn build_value_predictor(cfg: &MetaConfig, target: TargetSpec) -> ValuePredictor {
        let head = target.head(cfg.key_dim);
        ValuePredictor::new(cfg.key_dim, cfg.vp_hidden, head.value_dim(), head.value_kind())
    }

    /// Learner from stored parameters; shapes are checked against `cfg`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        cfg: MetaConfig,
        target: TargetSpec,
        input_dim: usize,
        key_net: KeyNetwork,
        value_net: Option<KeyNetwork>,
        theta: ParamSet,
        omega: ParamSet,
        step: usize,
    ) -> Result<Self, MetaError> {
        cfg.validate()?;
        let model = BaseModel::new(target.head(cfg.key_dim), input_dim, cfg.hidden);
        let vp = Self::build_value_predictor(&cfg, target);
        let reference = model.zero_params();
        if !theta.is_congruent(&reference) {
            return Err(MetaError::Data(
                "base-model parameters do not match the configured dimensions".into(),
            ));
        }
        vp.check(&omega)
            .map_err(|e| MetaError::Data(format!("value-predictor parameters: {e}")))?;
        if key_net.input_dim() != input_dim || key_net.key_dim() != cfg.key_dim {
            return Err(MetaError::Data("key network does not match the configured dimensions".into()));
        }
        match (target, &value_net) {
            (TargetSpec::Labels { .. }, None) => {}
            (TargetSpec::Vectors { dim }, Some(v)) if v.input_dim() == dim && v.key_dim() == cfg.key_dim => {}
            _ => return Err(MetaError::Data("value network does not match the target kind".into())),
        }
        let adam = (cfg.optimizer == OuterOptimizer::Adam).then(|| Adam::new(&theta));
        Ok(Self {
            cfg,
            target,
            model,
            key_net,
            value_net,
            vp,
            theta,
            omega,
            adam,
            step,
        })
    }

    pub fn config(&self) -> &MetaConfig {
        &self.cfg
    }

    pub fn target(&self) -> TargetSpec {
        self.target
    }

    pub fn model(&self) -> &BaseModel {
        &self.model
    }

    pub fn value_predictor(&self) -> &ValuePredictor {
        &self.vp
    }

    pub fn key_net(&self) -> &KeyNetwork {
        &self.key_net
    }

    pub fn value_net(&self) -> Option<&KeyNetwork> {
        self.value_net.as_ref()
    }

    pub fn theta(&self) -> &ParamSet {
        &self.theta
    }

    pub fn omega(&self) -> &ParamSet {
        &self.omega
    }

    /// Outer steps taken so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn input_dim(&self) -> usize {
        self.model.input_dim
    }

    /// Overrides the interpolation weight, e.g. to evaluate without memory.
    pub fn set_beta(&mut self, beta: f64) -> Result<(), MetaError> {
        let cfg = MetaConfig { beta, ..self.cfg.clone() };
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    fn prepare(&self, ep: &Episode) -> Result<TaskData, MetaError> {
        if ep.support.is_empty() || ep.query.is_empty() {
            return Err(MetaError::Data("support and query sets must be nonempty".into()));
        }
        let dim = self.model.input_dim;
        for s in ep.support.iter().chain(&ep.query) {
            if s.x.len() != dim {
                return Err(MetaError::Data(format!(
                    "input width {} does not match model input width {dim}",
                    s.x.len()
                )));
            }
            let ok = match (&s.y, self.target) {
                (Target::Label(l), TargetSpec::Labels { classes }) => *l < classes,
                (Target::Vector(v), TargetSpec::Vectors { dim }) => v.len() == dim,
                _ => false,
            };
            if !ok {
                return Err(MetaError::Data(format!("target {:?} does not fit {:?}", s.y, self.target)));
            }
        }
        let encode = |b: TargetBatch| -> (Tensor, Option<Vec<usize>>) {
            match (b, self.target) {
                (TargetBatch::Labels(l), TargetSpec::Labels { classes }) => {
                    let data = l.iter().flat_map(|&c| one_hot(c, classes).into_data()).collect();
                    (Tensor::matrix(l.len(), classes, data), Some(l))
                }
                (TargetBatch::Vectors(t), _) => (t, None),
                (TargetBatch::Labels(_), TargetSpec::Vectors { .. }) => unreachable!("checked above"),
            }
        };
        let (support_y, _) = encode(ep.support_targets());
        let (query_y, query_labels) = encode(ep.query_targets());
        Ok(TaskData {
            support_x: ep.support_inputs(),
            support_y,
            query_x: ep.query_inputs(),
            query_y,
            query_labels,
        })
    }

    /// Keys and memory values of the support samples.
    fn support_pairs(&self, data: &TaskData) -> Result<(Tensor, Tensor), MetaError> {
        let keys = self.key_net.encode_batch(&data.support_x)?;
        let values = match &self.value_net {
            None => data.support_y.clone(),
            Some(net) => net.encode_batch(&data.support_y)?,
        };
        Ok((keys, values))
    }

    fn build_memory(&self, keys: &Tensor, values: &Tensor) -> Result<TaskMemory, MetaError> {
        let capacity = capacity_for(self.cfg.store_ratio, keys.rows())?;
        let mut memory = TaskMemory::new(capacity, keys.cols(), values.cols())?;
        for i in 0..keys.rows() {
            memory.write(MemorySlot::new(
                Tensor::vector(keys.row(i).to_vec()),
                Tensor::vector(values.row(i).to_vec()),
            ))?;
        }
        Ok(memory)
    }

    /// Predicted values `[queries, value_dim]` for every query sample.
    fn predicted_values(
        &self,
        omega: &ParamSet,
        data: &TaskData,
        support: &(Tensor, Tensor),
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor, MetaError> {
        let query_keys = self.key_net.encode_batch(&data.query_x)?;
        if self.cfg.ablation == Ablation::NoLocalAdaptation {
            return Ok(self.vp.predict_batch(omega, &query_keys)?);
        }
        let memory = self.build_memory(&support.0, &support.1)?;
        let n = self.cfg.n_neighbors;
        let mut rows = Vec::with_capacity(query_keys.rows() * self.vp.value_dim());
        for j in 0..query_keys.rows() {
            let key = Tensor::vector(query_keys.row(j).to_vec());
            let neighbors = match self.cfg.ablation {
                Ablation::NoSimilaritySearch => memory.read_random(n, rng)?,
                _ => memory.read(&key, n)?,
            };
            let value = match self.cfg.ablation {
                Ablation::NoValuePredictor => mean_value(&neighbors)?,
                _ => imitate_neighbors(&self.vp, omega, &key, &neighbors, &self.cfg.local)?,
            };
            rows.extend_from_slice(value.data());
        }
        Ok(Tensor::matrix(query_keys.rows(), self.vp.value_dim(), rows))
    }

    /// Query loss of `params` and the corresponding metric. `predicted` is
    /// `None` when the memory path is off.
    fn query_loss(
        &self,
        tape: &Tape,
        params: &ParamVars,
        data: &TaskData,
        predicted: Option<&Tensor>,
    ) -> Result<(Var, f64), MetaError> {
        let x = tape.leaf(data.query_x.clone());
        let y = tape.leaf(data.query_y.clone());
        match self.model.head {
            HeadKind::Label { .. } => {
                let logits = self.model.record(tape, params, x, None)?;
                let labels = data.query_labels.as_deref().expect("label targets");
                let beta = self.cfg.beta;
                let (loss, probs) = match predicted {
                    Some(v) if beta < 1.0 => {
                        let probs = tape.softmax(logits)?;
                        let base = tape.scale(probs, beta)?;
                        let memory = tape.leaf(v.map(|p| (1.0 - beta) * p));
                        let mixed = tape.add(base, memory)?;
                        let picked = tape.mul(tape.log(mixed)?, y)?;
                        let total = tape.sum(picked)?;
                        let loss = tape.scale(total, -1.0 / labels.len() as f64)?;
                        (loss, tape.value(mixed))
                    }
                    _ => {
                        let loss = tape.softmax_cross_entropy(logits, y)?;
                        (loss, tape.value(tape.softmax(logits)?))
                    }
                };
                let correct = labels
                    .iter()
                    .enumerate()
                    .filter(|&(i, &l)| Tensor::vector(probs.row(i).to_vec()).argmax() == l)
                    .count();
                Ok((loss, correct as f64 / labels.len() as f64))
            }
            HeadKind::Vector { value_dim, .. } => {
                let cond = match predicted {
                    Some(v) => v.clone(),
                    None => Tensor::zeros(&[data.query_x.rows(), value_dim]),
                };
                let c = tape.leaf(cond);
                let pred = self.model.record(tape, params, x, Some(c))?;
                let loss = tape.mse(pred, y)?;
                Ok((loss, tape.item(loss)))
            }
        }
    }

    /// Query loss of the initialization alone.
    fn pre_update_loss(&self, data: &TaskData) -> Result<f64, MetaError> {
        let tape = Tape::new();
        let params = self.theta.bind(&tape);
        let (loss, _) = self.query_loss(&tape, &params, data, None)?;
        Ok(tape.item(loss))
    }

    /// Records the inner loop and returns the adapted parameters.
    fn record_inner(
        &self,
        tape: &Tape,
        initial: &ParamVars,
        data: &TaskData,
        order: DiffOrder,
    ) -> Result<ParamVars, MetaError> {
        let x = tape.leaf(data.support_x.clone());
        let y = tape.leaf(data.support_y.clone());
        let mut current = initial.clone();
        for _ in 0..self.cfg.inner_steps {
            let loss = support_loss(tape, &self.model, &current, x, y)?;
            current = recorded_step(tape, &current, loss, self.cfg.inner_lr, order)?;
        }
        Ok(current)
    }

    fn train_task(&self, omega: &ParamSet, ep: &Episode, rng: &mut ChaCha8Rng) -> Result<TaskResult, MetaError> {
        let data = self.prepare(ep)?;
        let pre = self.pre_update_loss(&data)?;
        if self.cfg.method == Method::Finetune {
            return self.finetune_task(&data, pre);
        }
        let predicted = match self.cfg.uses_memory() {
            true => {
                let support = self.support_pairs(&data)?;
                Some(self.predicted_values(omega, &data, &support, rng)?)
            }
            false => None,
        };
        let tape = Tape::new();
        let initial = self.theta.bind(&tape);
        let adapted = self.record_inner(&tape, &initial, &data, self.cfg.order)?;
        let (loss, metric) = self.query_loss(&tape, &adapted, &data, predicted.as_ref())?;
        let wrt = match self.cfg.order {
            DiffOrder::Second => &initial,
            DiffOrder::First => &adapted,
        };
        let grad = wrt.grad_values(&tape, loss)?;
        Ok(TaskResult {
            grad: Some(grad.grads),
            pre,
            post: tape.item(loss),
            metric,
        })
    }

    /// Joint-training gradient on all samples of the episode; the post-update
    /// numbers come from adapting a copy on the support set.
    fn finetune_task(&self, data: &TaskData, pre: f64) -> Result<TaskResult, MetaError> {
        let tape = Tape::new();
        let params = self.theta.bind(&tape);
        let rows = data.support_x.rows() + data.query_x.rows();
        let stack = |a: &Tensor, b: &Tensor| {
            let mut d = a.data().to_vec();
            d.extend_from_slice(b.data());
            Tensor::matrix(rows, a.cols(), d)
        };
        let x = tape.leaf(stack(&data.support_x, &data.query_x));
        let y = tape.leaf(stack(&data.support_y, &data.query_y));
        let loss = support_loss(&tape, &self.model, &params, x, y)?;
        let grad = params.grad_values(&tape, loss)?.grads;
        let (post, metric) = self.evaluate_adapted(data, None)?;
        Ok(TaskResult {
            grad: Some(grad),
            pre,
            post,
            metric,
        })
    }

    /// Post-update loss and metric without recording gradients with respect
    /// to the initialization.
    fn evaluate_adapted(&self, data: &TaskData, predicted: Option<&Tensor>) -> Result<(f64, f64), MetaError> {
        let tape = Tape::new();
        let initial = self.theta.bind(&tape);
        let adapted = self.record_inner(&tape, &initial, data, DiffOrder::First)?;
        let (loss, metric) = self.query_loss(&tape, &adapted, data, predicted)?;
        Ok((tape.item(loss), metric))
    }

    /// One outer step on a batch of training episodes.
    ///
    /// For each task the value predictor first takes its global step on the
    /// task's support pairs; the inner loop, memory reads and local
    /// adaptation then run, and the outer gradient is averaged over tasks.
    pub fn meta_train_step(&mut self, batch: &[Episode]) -> Result<StepMetrics, MetaError> {
        if batch.is_empty() {
            return Err(MetaError::Data("empty task batch".into()));
        }
        // the value predictor moves task by task, so its snapshots are taken
        // before the per-task work runs in parallel
        let mut omegas = Vec::with_capacity(batch.len());
        for ep in batch {
            if self.cfg.uses_memory() {
                let step = || -> Result<ParamSet, MetaError> {
                    let data = self.prepare(ep)?;
                    let (keys, values) = self.support_pairs(&data)?;
                    Ok(global_step(&self.vp, &self.omega, &keys, &values, self.cfg.global_lr)?)
                };
                self.omega = step().map_err(|e| e.in_task(&ep.task_id))?;
            }
            omegas.push(self.omega.clone());
        }
        let step = self.step;
        let seed = self.cfg.seed;
        let this = &*self;
        let results: Vec<TaskResult> = batch
            .par_iter()
            .zip(&omegas)
            .enumerate()
            .map(|(i, (ep, omega))| {
                let mut rng = rng_for(seed, STREAM_TRAIN_READS + ((step as u64) << 12) + i as u64);
                this.train_task(omega, ep, &mut rng).map_err(|e| e.in_task(&ep.task_id))
            })
            .collect::<Result<_, _>>()?;

        let k = results.len() as f64;
        let mut grad = self.theta.zeros_like();
        let (mut pre, mut post, mut metric) = (0.0, 0.0, 0.0);
        for r in &results {
            if let Some(g) = &r.grad {
                grad = grad.add(g)?;
            }
            pre += r.pre;
            post += r.post;
            metric += r.metric;
        }
        let grad = grad.scale(1.0 / k);
        let direction = match &mut self.adam {
            Some(adam) => adam.direction(&grad),
            None => grad,
        };
        let theta = self.theta.axpy(-self.cfg.outer_lr, &direction)?;
        if !theta.is_finite() {
            return Err(MetaError::Grad(crate::numgrad::GradError::NonFinite { op: "outer update" }));
        }
        self.theta = theta;
        self.step += 1;
        Ok(StepMetrics::new(self.step, Phase::Train, pre / k, post / k, metric / k))
    }

    fn test_task(&self, index: usize, ep: &Episode) -> Result<TaskEval, MetaError> {
        let data = self.prepare(ep)?;
        let pre = self.pre_update_loss(&data)?;
        let predicted = match self.cfg.uses_memory() {
            true => {
                let support = self.support_pairs(&data)?;
                let mut rng = rng_for(self.cfg.seed, STREAM_TEST_READS + index as u64);
                Some(self.predicted_values(&self.omega, &data, &support, &mut rng)?)
            }
            false => None,
        };
        let (post, metric) = self.evaluate_adapted(&data, predicted.as_ref())?;
        Ok(TaskEval {
            task_id: ep.task_id.clone(),
            pre_update_loss: pre,
            post_update_loss: post,
            metric,
        })
    }

    /// Evaluates on test episodes. Neither the initialization nor the value
    /// predictor's parameters change; local adaptation works on copies.
    pub fn meta_test(&self, episodes: &[Episode]) -> Result<EvalMetrics, MetaError> {
        let tasks = episodes
            .par_iter()
            .enumerate()
            .map(|(i, ep)| self.test_task(i, ep).map_err(|e| e.in_task(&ep.task_id)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EvalMetrics { tasks })
    }
}

/// Runs `steps` outer steps drawing `cfg.meta_batch` episodes at a time and
/// evaluates on `test` every `eval_every` steps (never if zero). Every row is
/// passed to `on_row` as soon as it exists.
pub fn train(
    learner: &mut Learner,
    episodes: &mut dyn Iterator<Item = Episode>,
    test: &[Episode],
    steps: usize,
    eval_every: usize,
    config_echo: serde_json::Value,
    mut on_row: impl FnMut(&StepMetrics),
) -> Result<RunMetrics, MetaError> {
    let start = Instant::now();
    let mut rows = Vec::new();
    for _ in 0..steps {
        let batch: Vec<Episode> = episodes.take(learner.cfg.meta_batch).collect();
        if batch.is_empty() {
            return Err(MetaError::Data("episode source is exhausted".into()));
        }
        let row = learner.meta_train_step(&batch)?;
        on_row(&row);
        rows.push(row);
        if eval_every > 0 && learner.step % eval_every == 0 && !test.is_empty() {
            let row = learner.meta_test(test)?.row(learner.step, Phase::Test);
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(RunMetrics {
        config: config_echo,
        seed: learner.cfg.seed,
        rows,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
