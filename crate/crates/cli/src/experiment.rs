//! Turns a resolved configuration into a training plan, a backbone shape and
//! loaded datasets.

use anyhow::{bail, Context};

use psl_core::data::{self, Dataset};
use psl_core::engine::{PretextConfig, StageSchedule, TrainPlan};
use psl_core::eval::{FinetuneSchedule, ProbeSchedule};
use psl_core::model::backbone::{build_backbone, BackboneConfig, BlockConfig};
use psl_core::partition::make_stages;
use psl_core::tasks::{
    contrastive_levels, generate_permutation_set, jigsaw_levels, rotation_levels, ContrastiveParams, JigsawGeometry,
    PermutationSet, TaskLevelSpec,
};

use crate::config::{DatasetKind, ExperimentConfig, FamilyName};

/// Every dataset loader yields RGB images.
pub const SOURCE_CHANNELS: usize = 3;

#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
    pub plan: TrainPlan,
    pub backbone: BackboneConfig,
}

impl Experiment {
    /// Validates everything that can be checked without touching data.
    pub fn build(config: ExperimentConfig) -> anyhow::Result<Self> {
        let hash = config.hash();
        let t = &config.train;
        let geometry = JigsawGeometry {
            window: t.jigsaw.window,
            grid: t.jigsaw.grid,
            cell: t.jigsaw.cell,
            tile: t.jigsaw.tile,
            normalize_tiles: t.jigsaw.normalize_tiles,
        };
        let pretext = PretextConfig {
            jigsaw: geometry,
            jigsaw_resize: t.jigsaw.resize,
            image_size: t.image_size,
        };
        let levels = task_levels(&config)?;
        let (channels, side) = pretext.input_shape(levels.last().expect("levels are non-empty"), SOURCE_CHANNELS);
        let b = &config.backbone;
        if b.widths.is_empty() || b.units == 0 {
            bail!("backbone needs at least one block and one unit per block");
        }
        let backbone = BackboneConfig {
            input_channels: channels,
            input_size: side,
            stem_width: b.stem_width,
            blocks: b
                .widths
                .iter()
                .enumerate()
                .map(|(i, &width)| BlockConfig {
                    units: b.units,
                    width,
                    downsample: i > 0,
                })
                .collect(),
            seed: b.seed,
        };
        backbone.validate()?;
        let (_, specs) = build_backbone(&backbone)?;
        let partition = make_stages(&specs, t.stage_width)?;
        let mut schedule = match &t.phases {
            Some(phases) => StageSchedule::from_phases(phases, t.base_lr),
            None => StageSchedule::scaled(t.epochs, t.base_lr),
        };
        schedule.lr_decay = t.lr_decay;
        schedule.momentum = t.momentum;
        schedule.weight_decay = t.weight_decay;
        schedule.bias_decay_exempt = t.bias_decay_exempt;
        let plan = TrainPlan {
            family: t.family.into(),
            levels,
            partition,
            schedules: vec![schedule],
            mode: t.mode.into(),
            batch_size: t.batch_size,
            seed: t.seed,
            pretext,
            steps_per_epoch: t.steps_per_epoch,
            deterministic: config.deterministic,
        };
        plan.validate()?;
        for (i, (c, s)) in plan.input_shapes(SOURCE_CHANNELS)?.into_iter().enumerate() {
            if (c, s) != (channels, side) {
                bail!("stage {} feeds [{c}, {s}, {s}] inputs but the backbone takes [{channels}, {side}, {side}]", i + 1);
            }
        }
        if config.eval.finetune.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            bail!("eval.finetune.fractions must lie in (0, 1]");
        }
        Ok(Experiment {
            config,
            hash,
            plan,
            backbone,
        })
    }

    /// Training and test splits, truncated to the configured limits.
    pub fn load_data(&self) -> anyhow::Result<(Dataset, Dataset)> {
        let d = &self.config.dataset;
        let (train, test) = match d.name {
            DatasetKind::Synthetic => (
                data::synthetic_shapes("synthetic/train", d.synthetic_train, d.image_side, d.seed),
                data::synthetic_shapes("synthetic/test", d.synthetic_test, d.image_side, d.seed.wrapping_add(1)),
            ),
            kind => {
                let root = self.config.dataset_root()?.expect("non-synthetic datasets have a root");
                match kind {
                    DatasetKind::Cifar10 => data::load_cifar10(root)?,
                    DatasetKind::Stl10 => data::load_stl10(root)?,
                    _ => (
                        data::load_image_folder(&root.join("train"), d.image_side)?,
                        data::load_image_folder(&root.join("test"), d.image_side)?,
                    ),
                }
            }
        };
        let train = match d.train_limit {
            Some(n) => train.take(n),
            None => train,
        };
        let test = match d.test_limit {
            Some(n) => test.take(n),
            None => test,
        };
        if train.channels() != SOURCE_CHANNELS {
            bail!("{} has {} channels, expected {SOURCE_CHANNELS}", train.id(), train.channels());
        }
        Ok((train, test))
    }

    pub fn probe_schedule(&self) -> ProbeSchedule {
        let p = &self.config.eval.probe;
        ProbeSchedule {
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            momentum: p.momentum,
            weight_decay: p.weight_decay,
            seed: p.seed,
        }
    }

    pub fn finetune_schedule(&self) -> FinetuneSchedule {
        let f = &self.config.eval.finetune;
        FinetuneSchedule {
            epochs: f.epochs,
            batch_size: f.batch_size,
            lr: f.lr,
            momentum: f.momentum,
            weight_decay: f.weight_decay,
            flip_p: f.flip_p,
            seed: f.seed,
        }
    }
}

fn task_levels(config: &ExperimentConfig) -> anyhow::Result<Vec<TaskLevelSpec>> {
    let t = &config.train;
    Ok(match t.family {
        FamilyName::Rotation => rotation_levels(),
        FamilyName::Jigsaw => {
            let j = &t.jigsaw;
            let largest = j.levels.iter().copied().max().context("train.jigsaw.levels is empty")?;
            let base = match &j.permutation_csv {
                Some(path) => {
                    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    PermutationSet::from_csv(&text)?
                }
                None => generate_permutation_set(j.grid * j.grid, largest, j.permutation_seed, j.min_hamming)?,
            };
            if base.n_elements() != j.grid * j.grid {
                bail!("permutations act on {} tiles but the grid has {}", base.n_elements(), j.grid * j.grid);
            }
            jigsaw_levels(&base, &j.levels)?
        }
        FamilyName::Contrastive => {
            let c = &t.contrastive;
            let params = ContrastiveParams {
                size: c.size,
                crop_scale: c.crop_scale,
                color_strength: c.color_strength,
                color_p: c.color_p,
                grayscale_p: c.grayscale_p,
                blur_p: c.blur_p,
                blur_sigma: c.blur_sigma,
                sobel_p: c.sobel_p,
            };
            contrastive_levels(&params, c.temperature)?
        }
    })
}
