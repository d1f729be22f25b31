//! Episode sources for a run: a synthetic family or episode files.

use std::sync::Arc;

use anyhow::{bail, Context, Result};
use memiml::metalearn::TargetSpec;
use memiml::tasks::{load_episodes, Episode, Family, Target, TaskFamily};

use crate::config::ExperimentConfig;

pub struct RunData {
    pub train: Box<dyn Iterator<Item = Episode>>,
    pub test: Vec<Episode>,
    pub input_dim: usize,
    pub target: TargetSpec,
}

fn family_target(family: Family) -> TargetSpec {
    match family {
        Family::NmeClassify => TargetSpec::Labels { classes: 2 },
        Family::NmeSine => TargetSpec::Vectors { dim: 1 },
    }
}

/// Target kind shared by every sample; label counts are inferred from the
/// largest label seen (at least two classes).
fn infer_target<'a>(episodes: impl IntoIterator<Item = &'a Episode>) -> Result<TargetSpec> {
    let mut spec: Option<TargetSpec> = None;
    for ep in episodes {
        for s in ep.support.iter().chain(&ep.query) {
            let here = match &s.y {
                Target::Label(l) => TargetSpec::Labels { classes: (l + 1).max(2) },
                Target::Vector(v) => TargetSpec::Vectors { dim: v.len() },
            };
            spec = Some(match (spec, here) {
                (None, h) => h,
                (Some(TargetSpec::Labels { classes: a }), TargetSpec::Labels { classes: b }) => {
                    TargetSpec::Labels { classes: a.max(b) }
                }
                (Some(TargetSpec::Vectors { dim: a }), TargetSpec::Vectors { dim: b }) if a == b => {
                    TargetSpec::Vectors { dim: a }
                }
                (Some(a), b) => bail!("episode {}: target {b:?} conflicts with {a:?}", ep.task_id),
            });
        }
    }
    spec.context("no samples to infer the target kind from")
}

/// Training episodes come from `task.train_file` when set (cycled in file
/// order), otherwise from the synthetic family. Test episodes come from
/// `task.test_file`, else from the family unless a train file is in use.
pub fn load(cfg: &ExperimentConfig) -> Result<RunData> {
    let file_test = match &cfg.test_file {
        Some(path) => Some(
            load_episodes(path).with_context(|| format!("loading test episodes {}", path.display()))?,
        ),
        None => None,
    };
    let data = match &cfg.train_file {
        Some(path) => {
            let train = load_episodes(path)
                .with_context(|| format!("loading training episodes {}", path.display()))?;
            if train.is_empty() {
                bail!("training file {} holds no episodes", path.display());
            }
            let test = file_test.unwrap_or_default();
            let target = infer_target(train.iter().chain(&test))?;
            let input_dim = train[0].input_dim();
            RunData {
                train: Box::new(train.into_iter().cycle()),
                test,
                input_dim,
                target,
            }
        }
        None => {
            let family = Arc::new(TaskFamily::new(cfg.task.clone())?);
            let test = match file_test {
                Some(t) => t,
                None => family.test_episodes(),
            };
            RunData {
                train: Box::new(family.train_stream()),
                test,
                input_dim: cfg.task.family.input_dim(),
                target: family_target(cfg.task.family),
            }
        }
    };
    if let Some(ep) = data.test.iter().find(|ep| ep.input_dim() != data.input_dim) {
        bail!(
            "test episode {} has input dimension {}, expected {}",
            ep.task_id,
            ep.input_dim(),
            data.input_dim
        );
    }
    Ok(data)
}
