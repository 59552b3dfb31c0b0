use std::collections::HashMap;

use crate::nn::Param;

use super::StageSchedule;

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v = mu * v + (g + wd * w)`, `w -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f32,
    weight_decay: f32,
    bias_decay_exempt: bool,
    velocity: HashMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(schedule: &StageSchedule) -> Self {
        Sgd {
            momentum: schedule.momentum as f32,
            weight_decay: schedule.weight_decay as f32,
            bias_decay_exempt: schedule.bias_decay_exempt,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, param: &mut Param, lr: f32) {
        let decay = if param.decay || !self.bias_decay_exempt {
            self.weight_decay
        } else {
            0.0
        };
        let v = self
            .velocity
            .entry(param.name.clone())
            .or_insert_with(|| vec![0.0; param.value.len()]);
        for ((w, g), v) in param.value.iter_mut().zip(&param.grad).zip(v.iter_mut()) {
            *v = self.momentum * *v + (*g + decay * *w);
            *w -= lr * *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates() {
        let sched = StageSchedule {
            momentum: 0.5,
            weight_decay: 0.0,
            ..StageSchedule::default()
        };
        let mut opt = Sgd::new(&sched);
        let mut p = Param::new("w", &[1], vec![1.0], true);
        p.grad = vec![1.0];
        opt.step(&mut p, 0.1);
        assert!((p.value[0] - 0.9).abs() < 1e-7);
        opt.step(&mut p, 0.1);
        // v = 0.5 * 1 + 1
        assert!((p.value[0] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn exempt_parameters_skip_decay() {
        let sched = StageSchedule::default();
        let mut opt = Sgd::new(&sched);
        let mut bias = Param::new("b", &[1], vec![2.0], false);
        opt.step(&mut bias, 1.0);
        assert_eq!(bias.value[0], 2.0);
        let mut w = Param::new("w", &[1], vec![2.0], true);
        opt.step(&mut w, 1.0);
        assert!(w.value[0] < 2.0);
    }
}
