//! Multi-level self-supervised task families.
//!
//! Each family (jigsaw, rotation, contrastive) is expanded into levels of
//! increasing difficulty whose payloads nest: every level contains the
//! permutations, angles or augmentation ops of the level below it.

pub mod augment;
pub mod jigsaw;
pub mod permutation;
pub mod rotation;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

pub use augment::{apply_augmentation, make_contrastive_pair, AugmentOp, AugmentationPipeline, ContrastiveParams};
pub use jigsaw::{make_jigsaw_sample, JigsawGeometry};
pub use permutation::{generate_permutation_set, nest_levels, Permutation, PermutationSet};
pub use rotation::{make_rotation_sample, rotation_levels, RotationSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskFamily {
    Jigsaw,
    Rotation,
    Contrastive,
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskFamily::Jigsaw => "jigsaw",
            TaskFamily::Rotation => "rotation",
            TaskFamily::Contrastive => "contrastive",
        })
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jigsaw" => Ok(TaskFamily::Jigsaw),
            "rotation" => Ok(TaskFamily::Rotation),
            "contrastive" | "simclr" => Ok(TaskFamily::Contrastive),
            other => Err(Error::invalid(format!("unknown task family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LevelPayload {
    Jigsaw(PermutationSet),
    Rotation(RotationSet),
    Contrastive(AugmentationPipeline),
}

impl LevelPayload {
    pub fn family(&self) -> TaskFamily {
        match self {
            LevelPayload::Jigsaw(_) => TaskFamily::Jigsaw,
            LevelPayload::Rotation(_) => TaskFamily::Rotation,
            LevelPayload::Contrastive(_) => TaskFamily::Contrastive,
        }
    }

    /// Set inclusion against a lower level of the same family.
    pub fn contains(&self, lower: &LevelPayload) -> bool {
        match (self, lower) {
            (LevelPayload::Jigsaw(hi), LevelPayload::Jigsaw(lo)) => {
                lo.members().iter().all(|m| hi.members().contains(m))
            }
            (LevelPayload::Rotation(hi), LevelPayload::Rotation(lo)) => lo.is_subset_of(hi),
            (LevelPayload::Contrastive(hi), LevelPayload::Contrastive(lo)) => hi.is_superset_of(lo),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    NtXent { temperature: f64 },
}

/// One difficulty level of a task family together with its loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLevelSpec {
    pub family: TaskFamily,
    pub level: u8,
    pub payload: LevelPayload,
    /// Output classes for classification families; `None` for contrastive.
    pub num_classes: Option<usize>,
    pub loss: LossKind,
}

pub const DEFAULT_TEMPERATURE: f64 = 0.5;

impl TaskLevelSpec {
    pub fn new(family: TaskFamily, level: u8, payload: LevelPayload) -> Result<Self> {
        if payload.family() != family {
            return Err(Error::invalid(format!(
                "{family} level given a {} payload",
                payload.family()
            )));
        }
        let (num_classes, loss) = match &payload {
            LevelPayload::Jigsaw(s) => (Some(s.len()), LossKind::CrossEntropy),
            LevelPayload::Rotation(s) => (Some(s.len()), LossKind::CrossEntropy),
            LevelPayload::Contrastive(p) => {
                p.validate()?;
                (
                    None,
                    LossKind::NtXent {
                        temperature: DEFAULT_TEMPERATURE,
                    },
                )
            }
        };
        Ok(TaskLevelSpec {
            family,
            level,
            payload,
            num_classes,
            loss,
        })
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(format!("temperature {temperature} must be positive")));
        }
        if let LossKind::NtXent { .. } = self.loss {
            self.loss = LossKind::NtXent { temperature };
        }
        Ok(self)
    }

    /// Human-readable payload summary for logs and reports.
    pub fn describe(&self) -> String {
        match &self.payload {
            LevelPayload::Jigsaw(s) => format!(
                "jigsaw L{}: {} permutations, avg Hamming {:.3}",
                self.level,
                s.len(),
                s.avg_hamming()
            ),
            LevelPayload::Rotation(s) => format!("rotation L{}: angles {:?}", self.level, s.angles()),
            LevelPayload::Contrastive(p) => format!(
                "contrastive L{}: {}",
                self.level,
                p.ops.iter().map(AugmentOp::kind).collect::<Vec<_>>().join("+")
            ),
        }
    }
}

/// Checks ascending level numbers and payload nesting across a family.
pub fn validate_level_chain(levels: &[TaskLevelSpec]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::invalid("task family has no levels"));
    }
    for pair in levels.windows(2) {
        let (lo, hi) = (&pair[0], &pair[1]);
        if hi.family != lo.family {
            return Err(Error::invalid("levels mix task families"));
        }
        if hi.level <= lo.level {
            return Err(Error::invalid("levels must be listed in ascending order"));
        }
        if !hi.payload.contains(&lo.payload) {
            return Err(Error::invalid(format!(
                "level {} does not contain level {}",
                hi.level, lo.level
            )));
        }
    }
    Ok(())
}

/// Nested jigsaw levels cut from one base permutation set.
pub fn jigsaw_levels(base: &PermutationSet, cardinalities: &[usize]) -> Result<Vec<TaskLevelSpec>> {
    nest_levels(base, cardinalities)?
        .into_iter()
        .enumerate()
        .map(|(i, set)| TaskLevelSpec::new(TaskFamily::Jigsaw, i as u8 + 1, LevelPayload::Jigsaw(set)))
        .collect()
}

pub fn contrastive_levels(params: &ContrastiveParams, temperature: f64) -> Result<Vec<TaskLevelSpec>> {
    (1..=3)
        .map(|level| {
            let pipeline = AugmentationPipeline::standard(level, params)?;
            TaskLevelSpec::new(TaskFamily::Contrastive, level, LevelPayload::Contrastive(pipeline))?
                .with_temperature(temperature)
        })
        .collect()
}

/// Provenance of a generated sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub source_id: u64,
    pub seed: u64,
}

/// A generated pretext input with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct PretextSample {
    pub input: Image,
    pub label: usize,
    pub meta: SampleMeta,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_validation_catches_broken_nesting() {
        let levels = rotation_levels();
        assert!(validate_level_chain(&levels).is_ok());
        let reversed: Vec<_> = levels.iter().rev().cloned().collect();
        assert!(validate_level_chain(&reversed).is_err());
        let mut bad = levels.clone();
        bad[1].payload = LevelPayload::Rotation(RotationSet::new(vec![0, 90]).unwrap());
        assert!(validate_level_chain(&bad).is_err());
    }

    #[test]
    fn contrastive_levels_carry_temperature() {
        let levels = contrastive_levels(&ContrastiveParams::default(), 0.2).unwrap();
        assert!(validate_level_chain(&levels).is_ok());
        assert!(levels.iter().all(|l| l.num_classes.is_none()));
        assert_eq!(levels[2].loss, LossKind::NtXent { temperature: 0.2 });
        assert!(levels[0].clone().with_temperature(0.0).is_err());
    }

    #[test]
    fn mismatched_payload_is_rejected() {
        let set = RotationSet::multiples_of(90).unwrap();
        assert!(TaskLevelSpec::new(TaskFamily::Jigsaw, 1, LevelPayload::Rotation(set)).is_err());
    }
}
