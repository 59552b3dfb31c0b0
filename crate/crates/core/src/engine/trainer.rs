use std::path::{Path, PathBuf};
use std::time::Instant;

use super::{build_batch, lr_at, LogRecord, Sgd, Targets, TrainLog, TrainMode, TrainPlan};
use super::{epoch_order, sample_seed, EnvFingerprint};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{build_backbone, cross_entropy, nt_xent, Backbone, BackboneConfig, Head};
use crate::nn::Tensor;
use crate::partition::GradientScope;
use crate::tasks::LossKind;

#[derive(Debug)]
pub struct StageOutcome {
    /// The trained head; callers normally drop it.
    pub head: Head,
    pub steps: u64,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
}

fn stage_loss(kind: &LossKind, targets: &Targets, z: &Tensor) -> Result<(f64, Tensor)> {
    let (n, d) = z.dims2()?;
    let zd: Vec<f64> = z.data().iter().map(|&v| f64::from(v)).collect();
    let (loss, grad) = match (kind, targets) {
        (LossKind::CrossEntropy, Targets::Classes(labels)) => cross_entropy(&zd, d, labels)?,
        (LossKind::NtXent { temperature }, Targets::Pairs) => nt_xent(&zd, d, *temperature)?,
        _ => return Err(Error::invalid("loss does not match the batch targets")),
    };
    if !loss.is_finite() {
        return Err(Error::invalid(format!("loss diverged to {loss}")));
    }
    Ok((loss, Tensor::from_vec(&[n, d], grad.into_iter().map(|g| g as f32).collect())?))
}

/// Trains one stage of `plan` in place and appends its step records to `log`.
/// Blocks below the trainable range run in evaluation mode; only the stage's
/// trainable set is updated.
pub fn train_stage(
    backbone: &mut Backbone,
    plan: &TrainPlan,
    stage_index: usize,
    data: &Dataset,
    log: &mut TrainLog,
    step_counter: &mut u64,
) -> Result<StageOutcome> {
    let stage = plan.stage(stage_index)?;
    let level = plan.level_for(stage_index)?;
    let schedule = plan.schedule_for(stage_index);
    let selector = plan.selector(stage_index)?;
    let (first, last) = (stage.first_block() - 1, stage.last_block() - 1);
    let train_from = match plan.mode.scope() {
        GradientScope::Local => first,
        GradientScope::Full => 0,
    };
    let mut head = plan.init_head(stage_index, backbone)?;
    let mut opt = Sgd::new(schedule);

    let available = data.len() / plan.batch_size;
    if available == 0 {
        return Err(Error::DataExhausted(format!(
            "{} samples cannot fill one batch of {}",
            data.len(),
            plan.batch_size
        )));
    }
    let steps = plan.steps_per_epoch.map_or(available, |cap| cap.min(available));
    let mut epoch_means = Vec::with_capacity(schedule.epochs);
    let mut stage_steps = 0u64;

    for epoch in 0..schedule.epochs {
        let lr = lr_at(schedule, epoch)?;
        let order = epoch_order(plan.seed, stage_index, epoch, data.len());
        let mut epoch_loss = 0.0;
        for s in 0..steps {
            let started = Instant::now();
            let idx = &order[s * plan.batch_size..(s + 1) * plan.batch_size];
            let seeds: Vec<u64> = (0..idx.len())
                .map(|k| sample_seed(plan.seed, stage_index, epoch, s * plan.batch_size + k))
                .collect();
            let batch = build_batch(level, &plan.pretext, data, idx, &seeds)?;

            backbone.for_each_param(|_, p| p.zero_grad());
            head.params_mut().into_iter().for_each(|p| p.zero_grad());
            let h = backbone.forward_to(&batch.input, last, Some(train_from))?;
            let z = head.forward(&h, true)?;
            let (loss, dz) = stage_loss(&level.loss, &batch.targets, &z)?;
            let dh = head.backward(&dz)?;
            backbone.backward_range(&dh, train_from, last)?;

            // Selected blocks beyond the window carry a zero gradient and
            // still take the decay and momentum part of the step.
            let lr32 = lr as f32;
            for b in 0..backbone.num_blocks() {
                let block = backbone.block_mut(b);
                if !selector.contains(block.name()) {
                    continue;
                }
                for p in block.params_mut() {
                    opt.step(p, lr32);
                }
            }
            for p in head.params_mut() {
                opt.step(p, lr32);
            }

            let wall_ms = if plan.deterministic {
                0
            } else {
                started.elapsed().as_millis() as u64
            };
            log.push(LogRecord::Step {
                stage: stage_index,
                epoch,
                step: *step_counter,
                loss,
                lr,
                wall_ms,
            })?;
            *step_counter += 1;
            stage_steps += 1;
            epoch_loss += loss;
        }
        epoch_means.push(epoch_loss / steps as f64);
        log::info!(
            "stage {stage_index} epoch {}/{}: loss {:.4} lr {lr:.2e}",
            epoch + 1,
            schedule.epochs,
            epoch_loss / steps as f64
        );
    }
    backbone.clear_caches();
    head.clear_cache();
    log.flush()?;
    Ok(StageOutcome {
        head,
        steps: stage_steps,
        first_epoch_loss: epoch_means[0],
        last_epoch_loss: *epoch_means.last().expect("at least one epoch"),
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub run_id: String,
    pub config_hash: String,
    /// Where checkpoints and `trainlog.jsonl` go; nothing is written when unset.
    pub run_dir: Option<PathBuf>,
    /// A stage-boundary checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

#[derive(Debug)]
pub struct RunOutput {
    /// Heads already discarded.
    pub backbone: Backbone,
    pub log: Vec<LogRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub const LOG_FILE: &str = "trainlog.jsonl";

fn save(backbone: &mut Backbone, plan: &TrainPlan, opts: &RunOptions, dir: &Path, name: &str, stage: usize, step: u64) -> Result<PathBuf> {
    let path = dir.join(name);
    let summary = plan.effective_partition()?.summary_table();
    Checkpoint::from_backbone(
        backbone,
        CheckpointMeta {
            run_id: opts.run_id.clone(),
            config_hash: opts.config_hash.clone(),
            step,
            stage_completed: stage,
            partition_summary: summary,
        },
    )
    .save(&path)?;
    Ok(path)
}

/// Runs every stage of `plan` in order, checkpointing at stage boundaries.
pub fn run_plan(plan: &TrainPlan, config: &BackboneConfig, data: &Dataset, opts: &RunOptions) -> Result<RunOutput> {
    plan.validate()?;
    for (i, (c, side)) in plan.input_shapes(data.channels())?.into_iter().enumerate() {
        if c != config.input_channels || side != config.input_size {
            return Err(Error::shape(format!(
                "stage {} feeds [{c}, {side}, {side}] inputs, backbone expects [{}, {s}, {s}]",
                i + 1,
                config.input_channels,
                s = config.input_size
            )));
        }
    }
    let (mut backbone, specs) = build_backbone(config)?;
    if specs != plan.partition.blocks() {
        return Err(Error::Architecture(
            "partition blocks do not describe the configured backbone".to_string(),
        ));
    }

    let mut start = 1;
    let mut step = 0u64;
    if let Some(path) = &opts.resume {
        let ck = Checkpoint::load(path)?;
        if ck.header.config_hash != opts.config_hash {
            return Err(Error::invalid(format!(
                "checkpoint was written by config {}, this run is {}",
                ck.header.config_hash, opts.config_hash
            )));
        }
        ck.restore_into(&mut backbone)?;
        start = ck.header.stage_completed + 1;
        step = ck.header.step;
    }

    let log_path = opts.run_dir.as_ref().map(|d| d.join(LOG_FILE));
    let mut log = match (&log_path, &opts.resume) {
        (Some(p), Some(_)) if p.is_file() => TrainLog::resume(p, start - 1)?,
        (Some(p), _) => {
            std::fs::create_dir_all(p.parent().expect("joined path")).map_err(|e| Error::io(p, e))?;
            TrainLog::create(p)?
        }
        (None, _) => TrainLog::in_memory(),
    };
    if !log.has_header() {
        log.push(LogRecord::Header {
            run_id: opts.run_id.clone(),
            config_hash: opts.config_hash.clone(),
            mode: plan.mode.to_string(),
            family: plan.family.to_string(),
            seed: plan.seed,
            env: EnvFingerprint::current(plan.deterministic),
        })?;
    }

    let n = plan.num_stages();
    let mut checkpoints = Vec::new();
    for i in start..=n {
        let outcome =
            train_stage(&mut backbone, plan, i, data, &mut log, &mut step).map_err(|e| e.in_stage(i))?;
        drop(outcome.head);
        let ck_name = match (&opts.run_dir, plan.mode) {
            (Some(dir), m) if m != TrainMode::E2e => {
                let p = save(&mut backbone, plan, opts, dir, &format!("stage{i}.ckpt"), i, step)?;
                checkpoints.push(p);
                Some(format!("stage{i}.ckpt"))
            }
            _ => None,
        };
        log.push(LogRecord::StageSummary {
            stage: i,
            level: plan.level_for(i)?.level,
            steps: outcome.steps,
            first_epoch_loss: outcome.first_epoch_loss,
            last_epoch_loss: outcome.last_epoch_loss,
            checkpoint: ck_name,
        })?;
        log.flush()?;
    }
    if let Some(dir) = &opts.run_dir {
        checkpoints.push(save(&mut backbone, plan, opts, dir, "final.ckpt", n, step)?);
    }
    Ok(RunOutput {
        backbone,
        log: log.into_records(),
        checkpoints,
    })
}
