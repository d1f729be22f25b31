use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Episode, Family, Sample, Target, TaskError, TaskFamilySpec};

/// Input range of the sine family.
pub const SINE_RANGE: (f64, f64) = (-5.0, 5.0);
const AMPLITUDE: (f64, f64) = (0.1, 5.0);
/// Samples closer than this to a task's decision line are rejected.
const MARGIN: f64 = 0.1;
const OFFSET_RADIUS: f64 = 1.0;

const STREAM_TRAIN_DEFS: u64 = 0;
const STREAM_TEST_DEFS: u64 = 1;
const STREAM_TRAIN_EPISODES: u64 = 2;
const STREAM_TEST_EPISODES: u64 = 3;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Parameters of one task.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskDef {
    /// `y = amplitude * sin(x + phase)` with `x` uniform in `[lo, hi]`.
    Sine {
        amplitude: f64,
        phase: f64,
        lo: f64,
        hi: f64,
    },
    /// Label 1 iff `(cos angle, sin angle) . u > 0` for the first two input
    /// coordinates `u`; the last two carry `offset` plus noise.
    Classify { angle: f64, offset: [f64; 2] },
}

impl TaskDef {
    fn sample(&self, noise: f64, rng: &mut impl Rng) -> Sample {
        match *self {
            TaskDef::Sine {
                amplitude,
                phase,
                lo,
                hi,
            } => {
                let x = rng.random_range(lo..=hi);
                let y = amplitude * (x + phase).sin() + noise * normal(rng);
                Sample {
                    x: vec![x],
                    y: Target::Vector(vec![y]),
                }
            }
            TaskDef::Classify { angle, offset } => {
                let w = [angle.cos(), angle.sin()];
                let (u, side) = loop {
                    let u = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
                    let side = w[0] * u[0] + w[1] * u[1];
                    if side.abs() >= MARGIN {
                        break (u, side);
                    }
                };
                let o = [offset[0] + noise * normal(rng), offset[1] + noise * normal(rng)];
                Sample {
                    x: vec![u[0], u[1], o[0], o[1]],
                    y: Target::Label(usize::from(side > 0.0)),
                }
            }
        }
    }
}

/// The training and test task pools of a family.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskFamily {
    pub spec: TaskFamilySpec,
    pub train: Vec<TaskDef>,
    pub test: Vec<TaskDef>,
}

fn sine_defs(spec: &TaskFamilySpec) -> (Vec<TaskDef>, Vec<TaskDef>) {
    let (lo, hi) = SINE_RANGE;
    let full = hi - lo;
    let n = spec.n_train_tasks;
    // at leak 0 the training ranges tile the full range without overlap
    let cell = full / n as f64;
    let width = cell + (full - cell) * spec.leak;
    let step = if n > 1 { (full - width) / (n - 1) as f64 } else { 0.0 };
    let draw = |rng: &mut ChaCha8Rng| {
        (
            rng.random_range(AMPLITUDE.0..=AMPLITUDE.1),
            rng.random_range(0.0..=PI),
        )
    };
    let mut rng = rng_for(spec.seed, STREAM_TRAIN_DEFS);
    let train = (0..n)
        .map(|i| {
            let (amplitude, phase) = draw(&mut rng);
            let start = if n > 1 { lo + step * i as f64 } else { lo + (full - width) / 2.0 };
            TaskDef::Sine {
                amplitude,
                phase,
                lo: start,
                hi: start + width,
            }
        })
        .collect();
    let mut rng = rng_for(spec.seed, STREAM_TEST_DEFS);
    let test = (0..spec.n_test_tasks)
        .map(|_| {
            let (amplitude, phase) = draw(&mut rng);
            TaskDef::Sine {
                amplitude,
                phase,
                lo,
                hi,
            }
        })
        .collect();
    (train, test)
}

fn classify_defs(spec: &TaskFamilySpec) -> (Vec<TaskDef>, Vec<TaskDef>) {
    let scale = (1.0 - spec.leak) * OFFSET_RADIUS;
    let mut rng = rng_for(spec.seed, STREAM_TRAIN_DEFS);
    let train = (0..spec.n_train_tasks)
        .map(|_| {
            let angle = rng.random_range(0.0..TAU);
            TaskDef::Classify {
                angle,
                offset: [scale * angle.cos(), scale * angle.sin()],
            }
        })
        .collect();
    // test offsets point in a direction unrelated to the rule
    let mut rng = rng_for(spec.seed, STREAM_TEST_DEFS);
    let test = (0..spec.n_test_tasks)
        .map(|_| {
            let angle = rng.random_range(0.0..TAU);
            let psi: f64 = rng.random_range(0.0..TAU);
            TaskDef::Classify {
                angle,
                offset: [scale * psi.cos(), scale * psi.sin()],
            }
        })
        .collect();
    (train, test)
}

impl TaskFamily {
    pub fn new(spec: TaskFamilySpec) -> Result<Self, TaskError> {
        spec.validate()?;
        let (train, test) = match spec.family {
            Family::NmeSine => sine_defs(&spec),
            Family::NmeClassify => classify_defs(&spec),
        };
        Ok(Self { spec, train, test })
    }

    /// Draws a fresh episode of `def`.
    pub fn episode(&self, task_id: String, def: &TaskDef, rng: &mut impl Rng) -> Episode {
        let noise = self.spec.noise;
        let support = (0..self.spec.shots).map(|_| def.sample(noise, rng)).collect();
        let query = (0..self.spec.queries).map(|_| def.sample(noise, rng)).collect();
        Episode {
            task_id,
            support,
            query,
        }
    }

    /// One fixed episode per test task.
    pub fn test_episodes(&self) -> Vec<Episode> {
        let mut rng = rng_for(self.spec.seed, STREAM_TEST_EPISODES);
        self.test
            .iter()
            .enumerate()
            .map(|(i, def)| self.episode(format!("test-{i}"), def, &mut rng))
            .collect()
    }

    /// Endless stream of training episodes: a uniformly chosen training task
    /// with freshly drawn samples each time.
    pub fn train_stream(self: &Arc<Self>) -> EpisodeStream {
        EpisodeStream {
            family: Arc::clone(self),
            rng: rng_for(self.spec.seed, STREAM_TRAIN_EPISODES),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeStream {
    family: Arc<TaskFamily>,
    rng: ChaCha8Rng,
}

impl EpisodeStream {
    pub fn family(&self) -> &TaskFamily {
        &self.family
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<Episode> {
        self.by_ref().take(size).collect()
    }
}

impl Iterator for EpisodeStream {
    type Item = Episode;

    fn next(&mut self) -> Option<Episode> {
        let i = self.rng.random_range(0..self.family.train.len());
        let def = &self.family.train[i];
        Some(self.family.episode(format!("train-{i}"), def, &mut self.rng))
    }
}

fn gen(spec: &TaskFamilySpec, family: Family) -> Result<EpisodeStream, TaskError> {
    if spec.family != family {
        return Err(TaskError::InvalidSpec(format!(
            "expected family {}, got {}",
            family.as_str(),
            spec.family.as_str()
        )));
    }
    Ok(Arc::new(TaskFamily::new(spec.clone())?).train_stream())
}

/// Training episodes of the sine regression family.
pub fn gen_nme_sine(spec: &TaskFamilySpec) -> Result<EpisodeStream, TaskError> {
    gen(spec, Family::NmeSine)
}

/// Training episodes of the 2-way classification family.
pub fn gen_nme_classify(spec: &TaskFamilySpec) -> Result<EpisodeStream, TaskError> {
    gen(spec, Family::NmeClassify)
}
