use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Phase::Train),
            "test" => Some(Phase::Test),
            _ => None,
        }
    }
}

/// Query losses before and after inner adaptation, averaged over tasks.
///
/// The pre-update loss is computed from the initialization alone, without the
/// memory path. `metric` is accuracy for the label head and mean squared
/// error for the vector head, both of the post-update prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub phase: Phase,
    pub pre_update_loss: f64,
    pub post_update_loss: f64,
    pub gap: f64,
    pub metric: f64,
}

impl StepMetrics {
    pub fn new(step: usize, phase: Phase, pre: f64, post: f64, metric: f64) -> Self {
        Self {
            step,
            phase,
            pre_update_loss: pre,
            post_update_loss: post,
            gap: pre - post,
            metric,
        }
    }
}

/// Per-task result of an evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task_id: String,
    pub pre_update_loss: f64,
    pub post_update_loss: f64,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub tasks: Vec<TaskEval>,
}

impl EvalMetrics {
    fn mean(&self, f: impl Fn(&TaskEval) -> f64) -> f64 {
        if self.tasks.is_empty() {
            return f64::NAN;
        }
        self.tasks.iter().map(f).sum::<f64>() / self.tasks.len() as f64
    }

    pub fn pre_update_loss(&self) -> f64 {
        self.mean(|t| t.pre_update_loss)
    }

    pub fn post_update_loss(&self) -> f64 {
        self.mean(|t| t.post_update_loss)
    }

    pub fn metric(&self) -> f64 {
        self.mean(|t| t.metric)
    }

    pub fn row(&self, step: usize, phase: Phase) -> StepMetrics {
        StepMetrics::new(step, phase, self.pre_update_loss(), self.post_update_loss(), self.metric())
    }
}

/// All rows of one run together with the configuration that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config: serde_json::Value,
    pub seed: u64,
    pub rows: Vec<StepMetrics>,
    /// Not part of the deterministic record.
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl RunMetrics {
    pub fn gaps(&self, phase: Phase) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.phase == phase)
            .map(|r| r.gap)
            .collect()
    }

    /// Metric of the last row in `phase`.
    pub fn final_metric(&self, phase: Phase) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.phase == phase).map(|r| r.metric)
    }
}

/// Window length used for smoothing and the terminal gap: a tenth of the
/// curve, rounded up.
pub fn window(n: usize) -> usize {
    n.div_ceil(10).max(1)
}

/// Trailing moving average; the first `window - 1` points average over the
/// points available so far.
pub fn smooth(values: &[f64]) -> Vec<f64> {
    let w = window(values.len());
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        sum += v;
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// Mean over the final tenth of the curve.
pub fn terminal_gap(gaps: &[f64]) -> Option<f64> {
    if gaps.is_empty() {
        return None;
    }
    let tail = &gaps[gaps.len() - window(gaps.len())..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Largest value of the smoothed curve, counting only full windows.
pub fn peak_gap(gaps: &[f64]) -> Option<f64> {
    if gaps.is_empty() {
        return None;
    }
    let w = window(gaps.len());
    smooth(gaps)[w - 1..].iter().copied().reduce(f64::max)
}
