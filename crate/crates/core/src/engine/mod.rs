//! Stage-by-stage training: each stage trains its block window and a fresh
//! head on its task level, then the head is dropped.

mod log;
mod optim;
mod pretext;
mod schedule;
mod trainer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use log::{check_stage_order, read_log, step_losses, EnvFingerprint, LogRecord, TrainLog};
pub use optim::Sgd;
pub use pretext::{build_batch, Batch, PretextConfig, Targets};
pub use schedule::{lr_at, StageSchedule};
pub use trainer::{run_plan, LOG_FILE, train_stage, RunOptions, RunOutput, StageOutcome};

use crate::error::{Error, Result};
use crate::model::{build_head, Backbone, Head, HeadConfig};
use crate::partition::{make_stages, trainable_set, GradientScope, ParamSelector, Stage, StagePartition};
use crate::rng;
use crate::tasks::{validate_level_chain, LossKind, TaskFamily, TaskLevelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainMode {
    /// Ascending task levels, gradients confined to each stage.
    #[serde(rename = "PSL")]
    Psl,
    /// Hardest level at every stage, gradients confined.
    #[serde(rename = "SL")]
    Sl,
    /// Ascending levels, every stage loss updates all earlier blocks too.
    #[serde(rename = "PSL_f")]
    PslF,
    /// One stage over the whole network on the hardest level.
    #[serde(rename = "E2E")]
    E2e,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [TrainMode::Psl, TrainMode::Sl, TrainMode::PslF, TrainMode::E2e];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Psl => "PSL",
            TrainMode::Sl => "SL",
            TrainMode::PslF => "PSL_f",
            TrainMode::E2e => "E2E",
        }
    }

    pub fn scope(self) -> GradientScope {
        match self {
            TrainMode::Psl | TrainMode::Sl => GradientScope::Local,
            TrainMode::PslF | TrainMode::E2e => GradientScope::Full,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "PSL" => Ok(TrainMode::Psl),
            "SL" => Ok(TrainMode::Sl),
            "PSL_F" | "PSLF" => Ok(TrainMode::PslF),
            "E2E" => Ok(TrainMode::E2e),
            _ => Err(Error::invalid(format!("unknown training mode `{s}` (PSL, SL, PSL_f, E2E)"))),
        }
    }
}

const TAG_HEAD: u64 = 0x4845;
const TAG_SHUFFLE: u64 = 0x5348;
const TAG_SAMPLE: u64 = 0x5341;

/// Seed of the sample at `position` of the shuffled order in one epoch.
pub fn sample_seed(plan_seed: u64, stage_index: usize, epoch: usize, position: usize) -> u64 {
    rng::derive_seed(plan_seed, &[TAG_SAMPLE, stage_index as u64, epoch as u64, position as u64])
}

/// Visiting order of `len` dataset indices in one epoch of a stage.
pub fn epoch_order(plan_seed: u64, stage_index: usize, epoch: usize, len: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::child_rng(plan_seed, &[TAG_SHUFFLE, stage_index as u64, epoch as u64]));
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub family: TaskFamily,
    /// Ascending difficulty.
    pub levels: Vec<TaskLevelSpec>,
    pub partition: StagePartition,
    /// One per executed stage, or a single schedule shared by all.
    pub schedules: Vec<StageSchedule>,
    pub mode: TrainMode,
    pub batch_size: usize,
    pub seed: u64,
    pub pretext: PretextConfig,
    /// Caps the number of minibatches per epoch.
    pub steps_per_epoch: Option<usize>,
    /// Records zero wall-clock times so logs are byte-reproducible.
    pub deterministic: bool,
}

impl TrainPlan {
    /// The stages actually executed: the partition's, or one window over
    /// every block for end-to-end training.
    pub fn effective_partition(&self) -> Result<StagePartition> {
        match self.mode {
            TrainMode::E2e => make_stages(self.partition.blocks(), self.partition.blocks().len()),
            _ => Ok(self.partition.clone()),
        }
    }

    pub fn num_stages(&self) -> usize {
        match self.mode {
            TrainMode::E2e => 1,
            _ => self.partition.num_stages(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::invalid("plan has no task levels"));
        }
        if let Some(l) = self.levels.iter().find(|l| l.family != self.family) {
            return Err(Error::invalid(format!("level {} belongs to {}, plan trains {}", l.level, l.family, self.family)));
        }
        validate_level_chain(&self.levels)?;
        let k = self.num_stages();
        if matches!(self.mode, TrainMode::Psl | TrainMode::PslF) && k > self.levels.len() {
            return Err(Error::invalid(format!(
                "{} stages but only {} task levels",
                k,
                self.levels.len()
            )));
        }
        if self.schedules.len() != 1 && self.schedules.len() != k {
            return Err(Error::invalid(format!(
                "{} schedules for {k} stages",
                self.schedules.len()
            )));
        }
        self.schedules.iter().try_for_each(StageSchedule::validate)?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.family == TaskFamily::Contrastive && self.batch_size < 2 {
            return Err(Error::invalid("contrastive training needs at least two sources per batch"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::invalid("steps per epoch must be positive"));
        }
        Ok(())
    }

    /// Task level bound to a stage. With `k` stages and `L` levels, stage `i`
    /// trains level `L - k + i`, so the last stage always meets the hardest
    /// level; single-level modes always use the hardest.
    pub fn level_for(&self, stage_index: usize) -> Result<&TaskLevelSpec> {
        let k = self.num_stages();
        if stage_index == 0 || stage_index > k {
            return Err(Error::invalid(format!("stage {stage_index} outside 1..={k}")));
        }
        let last = self.levels.len() - 1;
        let idx = match self.mode {
            TrainMode::Sl | TrainMode::E2e => last,
            TrainMode::Psl | TrainMode::PslF => (self.levels.len() + stage_index)
                .checked_sub(k + 1)
                .ok_or_else(|| Error::invalid("more stages than task levels"))?,
        };
        Ok(&self.levels[idx])
    }

    pub fn schedule_for(&self, stage_index: usize) -> &StageSchedule {
        if self.schedules.len() == 1 {
            &self.schedules[0]
        } else {
            &self.schedules[stage_index - 1]
        }
    }

    pub fn stage(&self, stage_index: usize) -> Result<Stage> {
        Ok(self.effective_partition()?.stage(stage_index)?.clone())
    }

    pub fn selector(&self, stage_index: usize) -> Result<ParamSelector> {
        trainable_set(&self.effective_partition()?, stage_index, self.mode.scope())
    }

    pub fn head_config(&self, stage_index: usize, backbone: &Backbone) -> Result<HeadConfig> {
        let stage = self.stage(stage_index)?;
        let width = backbone.block(stage.last_block() - 1).out_channels();
        let level = self.level_for(stage_index)?;
        Ok(match level.loss {
            LossKind::NtXent { .. } => HeadConfig::projection(width),
            LossKind::CrossEntropy => HeadConfig::classifier(
                width,
                level
                    .num_classes
                    .ok_or_else(|| Error::invalid("classification level without a class count"))?,
            ),
        })
    }

    /// The freshly initialized head a stage starts from.
    pub fn init_head(&self, stage_index: usize, backbone: &Backbone) -> Result<Head> {
        let stage = self.stage(stage_index)?;
        let cfg = self.head_config(stage_index, backbone)?;
        let mut r = rng::child_rng(self.seed, &[TAG_HEAD, stage_index as u64]);
        build_head(&stage.head_id, &cfg, &mut r)
    }

    /// Input `(channels, side)` each stage feeds the backbone.
    pub fn input_shapes(&self, source_channels: usize) -> Result<Vec<(usize, usize)>> {
        (1..=self.num_stages())
            .map(|i| Ok(self.pretext.input_shape(self.level_for(i)?, source_channels)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_backbone, BackboneConfig};
    use crate::tasks::rotation_levels;

    fn plan(mode: TrainMode, width: usize) -> TrainPlan {
        let (_, specs) = build_backbone(&BackboneConfig::default()).unwrap();
        TrainPlan {
            family: TaskFamily::Rotation,
            levels: rotation_levels(),
            partition: make_stages(&specs, width).unwrap(),
            schedules: vec![StageSchedule::scaled(20, 0.01)],
            mode,
            batch_size: 8,
            seed: 0,
            pretext: PretextConfig::desk(32),
            steps_per_epoch: None,
            deterministic: true,
        }
    }

    #[test]
    fn level_binding() {
        let p = plan(TrainMode::Psl, 3);
        let levels: Vec<u8> = (1..=3).map(|i| p.level_for(i).unwrap().level).collect();
        assert_eq!(levels, vec![1, 2, 3]);
        let sl = plan(TrainMode::Sl, 3);
        assert!((1..=3).all(|i| sl.level_for(i).unwrap().level == 3));
        let e2e = plan(TrainMode::E2e, 3);
        assert_eq!(e2e.num_stages(), 1);
        assert_eq!(e2e.level_for(1).unwrap().level, 3);
        assert!(e2e.level_for(2).is_err());
        let one = plan(TrainMode::Psl, 5);
        assert_eq!(one.level_for(1).unwrap().level, 3);
        assert!(plan(TrainMode::Psl, 1).validate().is_err());
        assert!(plan(TrainMode::Sl, 1).validate().is_ok());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in TrainMode::ALL {
            assert_eq!(m.as_str().parse::<TrainMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("psl_g".parse::<TrainMode>().is_err());
    }
}
