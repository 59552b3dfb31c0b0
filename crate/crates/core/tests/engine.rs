use std::collections::BTreeMap;

use psl_core::checkpoint::Checkpoint;
use psl_core::data::{synthetic_shapes, Dataset};
use psl_core::engine::*;
use psl_core::model::{build_backbone, Backbone, BackboneConfig};
use psl_core::nn::Tensor;
use psl_core::partition::make_stages;
use psl_core::tasks::{rotation_levels, TaskFamily};
use psl_core::Error;

fn config() -> BackboneConfig {
    BackboneConfig::with_widths(&[4, 6, 8, 8, 10])
}

fn plan(mode: TrainMode, width: usize, schedule: StageSchedule) -> TrainPlan {
    let (_, specs) = build_backbone(&config()).unwrap();
    TrainPlan {
        family: TaskFamily::Rotation,
        levels: rotation_levels(),
        partition: make_stages(&specs, width).unwrap(),
        schedules: vec![schedule],
        mode,
        batch_size: 8,
        seed: 21,
        pretext: PretextConfig::desk(32),
        steps_per_epoch: Some(1),
        deterministic: true,
    }
}

fn data() -> Dataset {
    synthetic_shapes("shapes", 32, 32, 4)
}

/// Parameter bits grouped by block.
fn by_block(net: &mut Backbone) -> BTreeMap<String, Vec<(String, Vec<u32>)>> {
    let mut out: BTreeMap<String, Vec<(String, Vec<u32>)>> = BTreeMap::new();
    net.for_each_param(|g, p| {
        out.entry(g.to_string())
            .or_default()
            .push((p.name.clone(), p.value.iter().map(|v| v.to_bits()).collect()));
    });
    net.for_each_buffer(|g, b| {
        out.entry(g.to_string())
            .or_default()
            .push((b.name.clone(), b.value.iter().map(|v| v.to_bits()).collect()));
    });
    out
}

fn head_bits(h: &mut psl_core::model::Head) -> Vec<Vec<u32>> {
    h.params_mut().into_iter().map(|p| p.value.iter().map(|v| v.to_bits()).collect()).collect()
}

fn one_step(mode: TrainMode, stage: usize, schedule: StageSchedule) -> (Vec<String>, Vec<String>, bool) {
    let p = plan(mode, 3, schedule);
    let (mut net, _) = build_backbone(&config()).unwrap();
    let before = by_block(&mut net);
    let mut init = p.init_head(stage, &net).unwrap();
    let mut log = TrainLog::in_memory();
    let mut step = 0;
    let mut out = train_stage(&mut net, &p, stage, &data(), &mut log, &mut step).unwrap();
    let after = by_block(&mut net);
    let (mut same, mut changed) = (Vec::new(), Vec::new());
    for (g, v) in &before {
        if after[g] == *v {
            same.push(g.clone());
        } else {
            changed.push(g.clone());
        }
    }
    let head_changed = head_bits(&mut init) != head_bits(&mut out.head);
    (same, changed, head_changed)
}

#[test]
fn local_stage_leaves_outside_blocks_bit_identical() {
    let (same, changed, head) = one_step(TrainMode::Psl, 2, StageSchedule::constant(1, 0.1));
    assert_eq!(same, ["B1", "B5"]);
    assert_eq!(changed, ["B2", "B3", "B4"]);
    assert!(head);
}

#[test]
fn full_gradient_stage_touches_every_block() {
    for stage in 1..=3 {
        let (same, changed, head) = one_step(TrainMode::PslF, stage, StageSchedule::constant(1, 0.1));
        assert!(same.is_empty(), "stage {stage} left {same:?}");
        assert_eq!(changed.len(), 5);
        assert!(head);
    }
}

#[test]
fn zero_learning_rate_changes_no_parameter() {
    let mut schedule = StageSchedule::constant(3, 0.0);
    schedule.weight_decay = 1e-2;
    let p = TrainPlan {
        steps_per_epoch: Some(2),
        ..plan(TrainMode::Psl, 3, schedule)
    };
    let (mut net, _) = build_backbone(&config()).unwrap();
    let params = |n: &mut Backbone| {
        let mut v = Vec::new();
        n.for_each_param(|_, p| v.push(p.value.iter().map(|x| x.to_bits()).collect::<Vec<_>>()));
        v
    };
    let before = params(&mut net);
    let mut log = TrainLog::in_memory();
    let mut step = 0;
    for stage in 1..=3 {
        train_stage(&mut net, &p, stage, &data(), &mut log, &mut step).unwrap();
    }
    assert_eq!(params(&mut net), before);
    assert_eq!(step, 18);
}

#[test]
fn single_block_head_step_matches_hand_gradient() {
    let cfg = BackboneConfig::with_widths(&[4]);
    let (mut net, specs) = build_backbone(&cfg).unwrap();
    let mut schedule = StageSchedule::constant(1, 0.5);
    schedule.weight_decay = 0.0;
    let p = TrainPlan {
        partition: make_stages(&specs, 1).unwrap(),
        batch_size: 2,
        ..plan(TrainMode::Psl, 3, schedule)
    };
    let d = synthetic_shapes("two", 2, 32, 9);
    let level = p.level_for(1).unwrap().clone();
    let order = epoch_order(p.seed, 1, 0, 2);
    let seeds: Vec<u64> = (0..2).map(|k| sample_seed(p.seed, 1, 0, k)).collect();
    let batch = build_batch(&level, &p.pretext, &d, &order, &seeds).unwrap();
    let Targets::Classes(labels) = &batch.targets else { unreachable!() };

    // pooled training-mode features and initial head
    let mut oracle_net = net.clone();
    let h = oracle_net.forward_to(&batch.input, 0, Some(0)).unwrap();
    let (n, c, hh, ww) = h.dims4().unwrap();
    let pooled: Vec<f64> = (0..n * c)
        .map(|i| h.data()[i * hh * ww..(i + 1) * hh * ww].iter().map(|&v| f64::from(v)).sum::<f64>() / (hh * ww) as f64)
        .collect();
    let mut head = p.init_head(1, &net).unwrap();
    let params = head.params_mut();
    let w0: Vec<f64> = params[0].value.iter().map(|&v| f64::from(v)).collect();
    let b0: Vec<f64> = params[1].value.iter().map(|&v| f64::from(v)).collect();
    let k = b0.len();
    let mut dw = vec![0.0; k * c];
    let mut db = vec![0.0; k];
    for i in 0..n {
        let z: Vec<f64> = (0..k).map(|o| b0[o] + (0..c).map(|j| w0[o * c + j] * pooled[i * c + j]).sum::<f64>()).collect();
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for o in 0..k {
            let g = (e[o] / s - f64::from(u8::from(o == labels[i]))) / n as f64;
            db[o] += g;
            for j in 0..c {
                dw[o * c + j] += g * pooled[i * c + j];
            }
        }
    }

    let mut log = TrainLog::in_memory();
    let mut step = 0;
    let mut out = train_stage(&mut net, &p, 1, &d, &mut log, &mut step).unwrap();
    let trained = out.head.params_mut();
    for (o, w) in trained[0].value.iter().enumerate() {
        assert!((f64::from(*w) - (w0[o] - 0.5 * dw[o])).abs() < 1e-6);
    }
    for (o, b) in trained[1].value.iter().enumerate() {
        assert!((f64::from(*b) - (b0[o] - 0.5 * db[o])).abs() < 1e-6);
    }
}

#[test]
fn milestone_arithmetic() {
    let s = StageSchedule::default();
    let close = |e, want: f64| (lr_at(&s, e).unwrap() - want).abs() < want * 1e-9;
    assert!(close(0, 0.01));
    assert!(close(19, 0.01));
    assert!(close(20, 0.001));
    assert!(close(40, 1e-4));
    assert!(close(50, 1e-5));
    assert!(lr_at(&s, 60).is_err());
    let flat = StageSchedule::constant(7, 0.3);
    assert!((0..7).all(|e| lr_at(&flat, e).unwrap() == 0.3));
}

#[test]
fn whole_network_window_makes_modes_agree() {
    let run = |mode| {
        let p = TrainPlan {
            steps_per_epoch: Some(2),
            ..plan(mode, 5, StageSchedule::constant(2, 0.05))
        };
        let out = run_plan(&p, &config(), &data(), &RunOptions::default()).unwrap();
        let mut net = out.backbone;
        (by_block(&mut net), step_losses(&out.log))
    };
    let psl = run(TrainMode::Psl);
    assert_eq!(psl, run(TrainMode::PslF));
    assert_eq!(psl, run(TrainMode::E2e));
}

#[test]
fn runs_are_reproducible_and_ordered() {
    let p = plan(TrainMode::Psl, 3, StageSchedule::constant(2, 0.05));
    let a = run_plan(&p, &config(), &data(), &RunOptions::default()).unwrap();
    let b = run_plan(&p, &config(), &data(), &RunOptions::default()).unwrap();
    assert_eq!(a.log, b.log);
    check_stage_order(&a.log).unwrap();
    let summaries: Vec<(usize, u8)> = a
        .log
        .iter()
        .filter_map(|r| match r {
            LogRecord::StageSummary { stage, level, .. } => Some((*stage, *level)),
            _ => None,
        })
        .collect();
    assert_eq!(summaries, vec![(1, 1), (2, 2), (3, 3)]);
    let sl = plan(TrainMode::Sl, 3, StageSchedule::constant(1, 0.05));
    assert!((1..=3).all(|i| sl.level_for(i).unwrap().level == 3));
}

#[test]
fn resume_from_stage_two_reproduces_run() {
    let dir = tempfile::tempdir().unwrap();
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    let p = plan(TrainMode::Psl, 3, StageSchedule::constant(2, 0.05));
    let opts = |d: &std::path::Path, resume| RunOptions {
        run_id: "r".into(),
        config_hash: "h".into(),
        run_dir: Some(d.to_path_buf()),
        resume,
    };
    let mut a = run_plan(&p, &config(), &data(), &opts(&full, None)).unwrap();
    let names: Vec<String> = a.checkpoints.iter().map(|c| c.file_name().unwrap().to_string_lossy().into()).collect();
    assert_eq!(names, ["stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "final.ckpt"]);

    std::fs::create_dir_all(&part).unwrap();
    std::fs::copy(full.join(LOG_FILE), part.join(LOG_FILE)).unwrap();
    let mut b = run_plan(&p, &config(), &data(), &opts(&part, Some(full.join("stage2.ckpt")))).unwrap();
    assert_eq!(by_block(&mut a.backbone), by_block(&mut b.backbone));
    assert_eq!(
        std::fs::read(full.join(LOG_FILE)).unwrap(),
        std::fs::read(part.join(LOG_FILE)).unwrap()
    );
    assert_eq!(
        std::fs::read(full.join("final.ckpt")).unwrap(),
        std::fs::read(part.join("final.ckpt")).unwrap()
    );

    let wrong = RunOptions {
        config_hash: "other".into(),
        ..opts(&part, Some(full.join("stage2.ckpt")))
    };
    assert!(run_plan(&p, &config(), &data(), &wrong).is_err());
    let ck = Checkpoint::load(&full.join("final.ckpt")).unwrap();
    assert!(ck.groups().iter().all(|g| g.starts_with('B')));
}

#[test]
fn short_dataset_is_reported_with_stage_context() {
    let p = TrainPlan {
        batch_size: 64,
        ..plan(TrainMode::Psl, 3, StageSchedule::constant(1, 0.05))
    };
    let err = run_plan(&p, &config(), &data(), &RunOptions::default()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("stage 1"), "{msg}");
    assert!(matches!(err, Error::Stage { .. } | Error::DataExhausted(_)), "{err:?}");
}

#[test]
fn mismatched_input_contract_is_rejected() {
    let p = plan(TrainMode::Psl, 3, StageSchedule::constant(1, 0.05));
    let wrong = BackboneConfig {
        input_size: 24,
        ..config()
    };
    assert!(run_plan(&p, &wrong, &data(), &RunOptions::default()).is_err());
    let (mut net, _) = build_backbone(&config()).unwrap();
    assert!(net.forward_to(&Tensor::zeros(&[1, 3, 16, 16]), 0, None).is_err());
}

#[test]
fn stage_losses_fall_on_shapes() {
    let (_, specs) = build_backbone(&config()).unwrap();
    let p = TrainPlan {
        partition: make_stages(&specs, 3).unwrap(),
        batch_size: 32,
        steps_per_epoch: Some(4),
        schedules: vec![StageSchedule::scaled(6, 0.05)],
        ..plan(TrainMode::Psl, 3, StageSchedule::default())
    };
    let d = synthetic_shapes("shapes", 128, 32, 1);
    let out = run_plan(&p, &config(), &d, &RunOptions::default()).unwrap();
    for r in &out.log {
        if let LogRecord::StageSummary {
            stage,
            first_epoch_loss,
            last_epoch_loss,
            ..
        } = r
        {
            assert!(last_epoch_loss <= first_epoch_loss, "stage {stage}: {first_epoch_loss} -> {last_epoch_loss}");
        }
    }
}
