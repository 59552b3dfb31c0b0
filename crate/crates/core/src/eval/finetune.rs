use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::features::batch_tensor;
use super::probe::argmax;
use crate::data::Dataset;
use crate::engine::{Sgd, StageSchedule};
use crate::error::{Error, Result};
use crate::model::{build_head, cross_entropy, Backbone, HeadConfig};
use crate::nn::Tensor;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak rate, cosine-decayed to zero.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Probability of a horizontal flip per training image.
    pub flip_p: f64,
    pub seed: u64,
}

impl Default for FinetuneSchedule {
    fn default() -> Self {
        FinetuneSchedule {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            flip_p: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneResult {
    pub top1: f64,
    pub top5: f64,
    pub train_samples: usize,
    pub test_samples: usize,
}

/// Attaches a fresh classifier to the last block and trains every parameter
/// on `train`; scores top-1/top-5 on `test` in evaluation mode.
pub fn semi_supervised_finetune(
    backbone: &Backbone,
    train: &Dataset,
    test: &Dataset,
    schedule: &FinetuneSchedule,
) -> Result<FinetuneResult> {
    if train.num_classes() != test.num_classes() {
        return Err(Error::invalid("train and test splits disagree on the class list"));
    }
    if train.is_empty() || test.is_empty() || schedule.batch_size == 0 {
        return Err(Error::invalid("finetuning needs data and a positive batch size"));
    }
    let mut net = backbone.clone();
    let last = net.num_blocks() - 1;
    let config = net.config().clone();
    let classes = train.num_classes();
    let head_cfg = HeadConfig::classifier(net.block(last).out_channels(), classes);
    let mut head = build_head("finetune", &head_cfg, &mut rng::child_rng(schedule.seed, &[0xf1]))?;
    let mut opt = Sgd::new(&StageSchedule {
        momentum: schedule.momentum,
        weight_decay: schedule.weight_decay,
        ..StageSchedule::constant(schedule.epochs.max(1), schedule.lr)
    });

    let bs = schedule.batch_size.min(train.len());
    let steps = train.len() / bs;
    let total = (steps * schedule.epochs).max(1) as f64;
    let mut t = 0usize;
    for epoch in 0..schedule.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::child_rng(schedule.seed, &[0xf2, epoch as u64]));
        for s in 0..steps {
            let lr = (schedule.lr * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total).cos())) as f32;
            t += 1;
            let idx = &order[s * bs..(s + 1) * bs];
            let mut x = batch_tensor(train, idx, &config)?;
            let mut flip_rng = rng::child_rng(schedule.seed, &[0xf3, epoch as u64, s as u64]);
            let per = config.input_channels * config.input_size * config.input_size;
            let side = config.input_size;
            for sample in x.data_mut().chunks_exact_mut(per) {
                if flip_rng.gen::<f64>() < schedule.flip_p {
                    for row in sample.chunks_exact_mut(side) {
                        row.reverse();
                    }
                }
            }
            let labels: Vec<usize> = idx.iter().map(|&i| train.label(i)).collect();
            net.for_each_param(|_, p| p.zero_grad());
            head.params_mut().into_iter().for_each(|p| p.zero_grad());
            let h = net.forward_to(&x, last, Some(0))?;
            let z = head.forward(&h, true)?;
            let zd: Vec<f64> = z.data().iter().map(|&v| f64::from(v)).collect();
            let (_, g) = cross_entropy(&zd, classes, &labels)?;
            let dz = Tensor::from_vec(z.shape(), g.into_iter().map(|v| v as f32).collect())?;
            let dh = head.backward(&dz)?;
            net.backward_range(&dh, 0, last)?;
            net.for_each_param(|_, p| opt.step(p, lr));
            for p in head.params_mut() {
                opt.step(p, lr);
            }
        }
    }
    net.clear_caches();

    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let all: Vec<usize> = (0..test.len()).collect();
    for chunk in all.chunks(64) {
        let x = batch_tensor(test, chunk, &config)?;
        let h = net.features(&x, last)?;
        let z = head.forward(&h, false)?;
        for (row, &i) in z.data().chunks_exact(classes).zip(chunk) {
            let logits: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
            let label = test.label(i);
            if argmax(&logits) == label {
                top1 += 1;
            }
            let better = logits.iter().filter(|&&v| v > logits[label]).count();
            if better < 5 {
                top5 += 1;
            }
        }
    }
    Ok(FinetuneResult {
        top1: top1 as f64 / test.len() as f64,
        top5: top5 as f64 / test.len() as f64,
        train_samples: train.len(),
        test_samples: test.len(),
    })
}
