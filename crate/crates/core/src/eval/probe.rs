use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::FeatureTable;
use crate::error::{Error, Result};
use crate::rng;

/// Fixed schedule shared by every probe so comparisons differ only in the
/// features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak rate, cosine-decayed to zero over all steps.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeSchedule {
    fn default() -> Self {
        ProbeSchedule {
            epochs: 30,
            batch_size: 32,
            lr: 0.2,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_correct: usize,
    pub test_total: usize,
    pub predictions: Vec<usize>,
}

/// Affine softmax classifier over standardized features.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub classes: usize,
    pub dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LinearModel {
    fn standardized(&self, row: &[f32], out: &mut [f64]) {
        for (((o, &v), m), s) in out.iter_mut().zip(row).zip(&self.mean).zip(&self.inv_std) {
            *o = (f64::from(v) - m) * s;
        }
    }

    pub fn logits(&self, row: &[f32]) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        self.standardized(row, &mut x);
        (0..self.classes)
            .map(|k| self.bias[k] + self.weight[k * self.dim..(k + 1) * self.dim].iter().zip(&x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn predict(&self, row: &[f32]) -> usize {
        argmax(&self.logits(row))
    }

    pub fn accuracy(&self, table: &FeatureTable) -> (usize, Vec<usize>) {
        let preds: Vec<usize> = (0..table.len()).map(|i| self.predict(table.row(i))).collect();
        let correct = preds.iter().zip(&table.labels).filter(|(p, l)| p == l).count();
        (correct, preds)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains the probe classifier on `train` and returns it.
pub fn fit_linear(train: &FeatureTable, classes: usize, schedule: &ProbeSchedule) -> Result<LinearModel> {
    let (n, d) = (train.len(), train.dim);
    if n == 0 || d == 0 {
        return Err(Error::invalid("probe needs a non-empty feature table"));
    }
    if train.labels.iter().any(|&l| l >= classes) {
        return Err(Error::invalid(format!("probe label outside 0..{classes}")));
    }
    if train.labels.iter().all(|&l| l == train.labels[0]) {
        return Err(Error::invalid("probe training labels contain a single class"));
    }
    if schedule.batch_size == 0 || schedule.epochs == 0 {
        return Err(Error::invalid("probe schedule needs positive epochs and batch size"));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(train.row(i)) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, &v), m) in var.iter_mut().zip(train.row(i)).zip(&mean) {
            *s += (f64::from(v) - m).powi(2);
        }
    }
    let inv_std = var.iter().map(|s| 1.0 / (s / n as f64).sqrt().max(1e-6)).collect();
    let mut model = LinearModel {
        classes,
        dim: d,
        weight: vec![0.0; classes * d],
        bias: vec![0.0; classes],
        mean,
        inv_std,
    };
    let x: Vec<f64> = {
        let mut all = vec![0.0; n * d];
        for i in 0..n {
            model.standardized(train.row(i), &mut all[i * d..(i + 1) * d]);
        }
        all
    };

    let mut vw = vec![0.0; classes * d];
    let mut vb = vec![0.0; classes];
    let steps_per_epoch = n.div_ceil(schedule.batch_size);
    let total = (steps_per_epoch * schedule.epochs) as f64;
    let mut t = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut gw = vec![0.0; classes * d];
    let mut gb = vec![0.0; classes];
    let mut p = vec![0.0; classes];
    for epoch in 0..schedule.epochs {
        order.shuffle(&mut rng::child_rng(schedule.seed, &[0x9b, epoch as u64]));
        for chunk in order.chunks(schedule.batch_size) {
            let lr = schedule.lr * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total).cos());
            t += 1;
            gw.iter_mut().for_each(|g| *g = 0.0);
            gb.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let xi = &x[i * d..(i + 1) * d];
                for k in 0..classes {
                    p[k] = model.bias[k] + model.weight[k * d..(k + 1) * d].iter().zip(xi).map(|(w, v)| w * v).sum::<f64>();
                }
                let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = p.iter().map(|v| (v - max).exp()).sum();
                for k in 0..classes {
                    let mut g = (p[k] - max).exp() / z;
                    if k == train.labels[i] {
                        g -= 1.0;
                    }
                    g *= scale;
                    gb[k] += g;
                    for (gwv, v) in gw[k * d..(k + 1) * d].iter_mut().zip(xi) {
                        *gwv += g * v;
                    }
                }
            }
            for ((w, v), g) in model.weight.iter_mut().zip(vw.iter_mut()).zip(&gw) {
                *v = schedule.momentum * *v + g + schedule.weight_decay * *w;
                *w -= lr * *v;
            }
            for ((b, v), g) in model.bias.iter_mut().zip(vb.iter_mut()).zip(&gb) {
                *v = schedule.momentum * *v + g;
                *b -= lr * *v;
            }
        }
    }
    Ok(model)
}

/// Fits on `train`, scores top-1 on the held-out `test`.
pub fn linear_probe(train: &FeatureTable, test: &FeatureTable, schedule: &ProbeSchedule) -> Result<ProbeResult> {
    if train.dim != test.dim {
        return Err(Error::shape(format!("train width {} vs test width {}", train.dim, test.dim)));
    }
    if test.is_empty() {
        return Err(Error::invalid("probe needs held-out rows"));
    }
    let classes = train.labels.iter().chain(&test.labels).max().map_or(0, |m| m + 1);
    let model = fit_linear(train, classes, schedule)?;
    let (train_correct, _) = model.accuracy(train);
    let (test_correct, predictions) = model.accuracy(test);
    Ok(ProbeResult {
        train_accuracy: train_correct as f64 / train.len() as f64,
        test_accuracy: test_correct as f64 / test.len() as f64,
        test_correct,
        test_total: test.len(),
        predictions,
    })
}
