use super::{Buffer, Mode, Param, Tensor};
use crate::error::{Error, Result};

const EPS: f32 = 1e-5;
const MOMENTUM: f32 = 0.1;

/// Per-channel batch normalization over `[N, C, H, W]`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    channels: usize,
    cache: Option<NormCache>,
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::constant(format!("{name}.gamma"), &[channels], 1.0, true),
            beta: Param::constant(format!("{name}.beta"), &[channels], 0.0, false),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: vec![0.0; channels],
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: vec![1.0; channels],
            },
            channels,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "{}: {c} channels, expected {}",
                self.gamma.name, self.channels
            )));
        }
        let hw = h * w;
        let mut out = x.clone();
        match mode {
            Mode::Eval => {
                for ch in 0..c {
                    let inv = 1.0 / (self.running_var.value[ch] + EPS).sqrt();
                    let scale = self.gamma.value[ch] * inv;
                    let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for v in &mut out.data_mut()[base..base + hw] {
                            *v = *v * scale + shift;
                        }
                    }
                }
                self.cache = None;
            }
            Mode::Train => {
                let m = (n * hw) as f64;
                let mut xhat = x.clone();
                let mut inv_std = vec![0.0f32; c];
                for ch in 0..c {
                    let mut sum = 0.0f64;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        sum += x.data()[base..base + hw].iter().map(|&v| f64::from(v)).sum::<f64>();
                    }
                    let mean = sum / m;
                    let mut sq = 0.0f64;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        sq += x.data()[base..base + hw]
                            .iter()
                            .map(|&v| (f64::from(v) - mean).powi(2))
                            .sum::<f64>();
                    }
                    let var = sq / m;
                    let inv = (1.0 / (var + f64::from(EPS)).sqrt()) as f32;
                    inv_std[ch] = inv;
                    let (g, bta, mean32) = (self.gamma.value[ch], self.beta.value[ch], mean as f32);
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        let xs = &mut xhat.data_mut()[base..base + hw];
                        let os = &mut out.data_mut()[base..base + hw];
                        for (xh, o) in xs.iter_mut().zip(os.iter_mut()) {
                            *xh = (*xh - mean32) * inv;
                            *o = g * *xh + bta;
                        }
                    }
                    let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                    let rm = &mut self.running_mean.value[ch];
                    *rm = (1.0 - MOMENTUM) * *rm + MOMENTUM * mean as f32;
                    let rv = &mut self.running_var.value[ch];
                    *rv = (1.0 - MOMENTUM) * *rv + MOMENTUM * unbiased as f32;
                }
                self.cache = Some(NormCache { xhat, inv_std });
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::shape(format!("{}: backward without a training forward", self.gamma.name)))?;
        let (n, c, h, w) = dy.dims4()?;
        if cache.xhat.shape() != dy.shape() {
            return Err(Error::shape(format!("{}: gradient shape mismatch", self.gamma.name)));
        }
        let hw = h * w;
        let m = (n * hw) as f32;
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        for ch in 0..c {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for (d, xh) in dy.data()[base..base + hw].iter().zip(&cache.xhat.data()[base..base + hw]) {
                    sum_dy += f64::from(*d);
                    sum_dy_xhat += f64::from(d * xh);
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat as f32;
            self.beta.grad[ch] += sum_dy as f32;
            let g = self.gamma.value[ch];
            let k = g * cache.inv_std[ch] / m;
            let (sd, sdx) = (sum_dy as f32, sum_dy_xhat as f32);
            for b in 0..n {
                let base = (b * c + ch) * hw;
                let dys = &dy.data()[base..base + hw];
                let xhs = &cache.xhat.data()[base..base + hw];
                let dxs = &mut dx.data_mut()[base..base + hw];
                for ((o, d), xh) in dxs.iter_mut().zip(dys).zip(xhs) {
                    *o = k * (m * d - sd - xh * sdx);
                }
            }
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_forward_normalizes_and_tracks_statistics() {
        let mut bn = BatchNorm2d::new("bn", 2);
        let x = Tensor::from_vec(&[2, 2, 1, 2], vec![1.0, 3.0, 10.0, 10.0, 5.0, 7.0, 20.0, 40.0]).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let ch0: Vec<f32> = vec![y.data()[0], y.data()[1], y.data()[4], y.data()[5]];
        let mean: f32 = ch0.iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((bn.running_mean.value[0] - 0.4).abs() < 1e-6);
        let before = bn.running_mean.clone();
        bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(bn.running_mean, before);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut bn = BatchNorm2d::new("bn", 2);
        bn.gamma.value = vec![1.3, 0.7];
        bn.beta.value = vec![0.1, -0.2];
        let x = Tensor::from_vec(&[3, 2, 2, 1], (0..12).map(|v| ((v * 7) % 5) as f32 * 0.3 - 0.2).collect()).unwrap();
        let r: Vec<f32> = (0..12).map(|i| ((i * 5) % 9) as f32 / 9.0 - 0.4).collect();
        bn.forward(&x, Mode::Train).unwrap();
        let dx = bn.backward(&Tensor::from_vec(&[3, 2, 2, 1], r.clone()).unwrap()).unwrap();
        let loss = |bn: &mut BatchNorm2d, x: &Tensor| -> f64 {
            let y = bn.clone().forward(x, Mode::Train).unwrap();
            y.data().iter().zip(&r).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()
        };
        let eps = 1e-2;
        for idx in 0..12 {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let fd = (loss(&mut bn, &xp) - loss(&mut bn, &xm)) / (2.0 * f64::from(eps));
            assert!((fd - f64::from(dx.data()[idx])).abs() < 2e-3, "{idx}: {fd} vs {}", dx.data()[idx]);
        }
        let mut probe = bn.clone();
        probe.gamma.value[1] += eps;
        let lp = loss(&mut probe, &x);
        probe.gamma.value[1] -= 2.0 * eps;
        let lm = loss(&mut probe, &x);
        let fd = (lp - lm) / (2.0 * f64::from(eps));
        assert!((fd - f64::from(bn.gamma.grad[1])).abs() < 1e-3);
    }
}
