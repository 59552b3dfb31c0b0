use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{Param, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Bias-free 2-d convolution lowered to im2col + GEMM.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::kaiming_normal(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
            rng,
        );
        Conv2d {
            weight,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_side(&self, side: usize) -> usize {
        (side + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, ho: usize, wo: usize, col: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let plane = ho * wo;
        for ci in 0..self.in_channels {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            out_row.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            *v = if ix < 0 || ix >= w as isize { 0.0 } else { src_row[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let plane = ho * wo;
        for ci in 0..self.in_channels {
            let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor, record: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "{}: input has {c} channels, expected {}",
                self.weight.name, self.in_channels
            )));
        }
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::shape(format!("{}: input {h}x{w} smaller than kernel", self.weight.name)));
        }
        let (ho, wo) = (self.output_side(h), self.output_side(w));
        let kk = self.in_channels * self.kernel * self.kernel;
        let plane = ho * wo;
        let mut out = Tensor::zeros(&[n, self.out_channels, ho, wo]);
        let mut col = vec![0.0f32; kk * plane];
        let in_stride = c * h * w;
        let out_stride = self.out_channels * plane;
        for i in 0..n {
            let xi = &x.data()[i * in_stride..(i + 1) * in_stride];
            let yi = &mut out.data_mut()[i * out_stride..(i + 1) * out_stride];
            if self.kernel == 1 && self.stride == 1 && self.padding == 0 {
                gemm_nn(self.out_channels, kk, plane, &self.weight.value, xi, 0.0, yi);
            } else {
                self.im2col(xi, h, w, ho, wo, &mut col);
                gemm_nn(self.out_channels, kk, plane, &self.weight.value, &col, 0.0, yi);
            }
        }
        self.input = if record { Some(x.clone()) } else { None };
        Ok(out)
    }

    /// Accumulates the weight gradient; returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, dy: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::shape(format!("{}: backward without a recorded forward", self.weight.name)))?;
        let (n, c, h, w) = x.dims4()?;
        let (ho, wo) = (self.output_side(h), self.output_side(w));
        let kk = c * self.kernel * self.kernel;
        let plane = ho * wo;
        if dy.shape() != [n, self.out_channels, ho, wo] {
            return Err(Error::shape(format!(
                "{}: output gradient {:?} does not match forward output",
                self.weight.name,
                dy.shape()
            )));
        }
        let pointwise = self.kernel == 1 && self.stride == 1 && self.padding == 0;
        let mut col = vec![0.0f32; kk * plane];
        let mut dcol = vec![0.0f32; kk * plane];
        let mut dx = need_input_grad.then(|| Tensor::zeros(&[n, c, h, w]));
        let in_stride = c * h * w;
        let out_stride = self.out_channels * plane;
        for i in 0..n {
            let xi = &x.data()[i * in_stride..(i + 1) * in_stride];
            let dyi = &dy.data()[i * out_stride..(i + 1) * out_stride];
            let cols: &[f32] = if pointwise {
                xi
            } else {
                self.im2col(xi, h, w, ho, wo, &mut col);
                &col
            };
            gemm_nt(self.out_channels, plane, kk, dyi, cols, 1.0, &mut self.weight.grad);
            if let Some(dx) = dx.as_mut() {
                let dxi = &mut dx.data_mut()[i * in_stride..(i + 1) * in_stride];
                if pointwise {
                    gemm_tn(kk, self.out_channels, plane, &self.weight.value, dyi, 0.0, dxi);
                } else {
                    gemm_tn(kk, self.out_channels, plane, &self.weight.value, dyi, 0.0, &mut dcol);
                    self.col2im(&dcol, h, w, ho, wo, dxi);
                }
            }
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn direct_conv(conv: &Conv2d, x: &Tensor) -> Vec<f32> {
        let (n, c, h, w) = x.dims4().unwrap();
        let (k, s, p) = (conv.kernel, conv.stride, conv.padding);
        let (ho, wo) = (conv.output_side(h), conv.output_side(w));
        let mut out = vec![0.0; n * conv.out_channels * ho * wo];
        for b in 0..n {
            for co in 0..conv.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((co * c + ci) * k + ky) * k + kx];
                                    acc += wv * x.data()[((b * c + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        out[((b * conv.out_channels + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let mut rng = rng_from_seed(1);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0)] {
            let mut conv = Conv2d::new("c", 3, 4, k, s, p, &mut rng);
            let x = Tensor::from_vec(&[2, 3, 5, 5], (0..150).map(|v| ((v * 7) % 13) as f32 / 13.0 - 0.5).collect())
                .unwrap();
            let y = conv.forward(&x, false).unwrap();
            let expect = direct_conv(&conv, &x);
            for (a, b) in y.data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-5, "k={k} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng_from_seed(2);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 2, 0)] {
            let mut conv = Conv2d::new("c", 2, 3, k, s, p, &mut rng);
            let x = Tensor::from_vec(&[2, 2, 4, 4], (0..64).map(|v| ((v * 5) % 11) as f32 / 11.0 - 0.4).collect())
                .unwrap();
            // loss = sum(y * r) for a fixed r
            let y = conv.forward(&x, true).unwrap();
            let r: Vec<f32> = (0..y.len()).map(|i| ((i * 3) % 7) as f32 / 7.0 - 0.5).collect();
            let dy = Tensor::from_vec(y.shape(), r.clone()).unwrap();
            let dx = conv.backward(&dy, true).unwrap().unwrap();
            let loss = |conv: &mut Conv2d, x: &Tensor| -> f64 {
                let y = conv.forward(x, false).unwrap();
                y.data().iter().zip(&r).map(|(a, b)| f64::from(a * b)).sum()
            };
            let eps = 1e-2f32;
            for idx in [0usize, 5, conv.weight.value.len() - 1] {
                let orig = conv.weight.value[idx];
                conv.weight.value[idx] = orig + eps;
                let lp = loss(&mut conv, &x);
                conv.weight.value[idx] = orig - eps;
                let lm = loss(&mut conv, &x);
                conv.weight.value[idx] = orig;
                let fd = (lp - lm) / (2.0 * f64::from(eps));
                assert!((fd - f64::from(conv.weight.grad[idx])).abs() < 1e-3, "dW {fd} vs {}", conv.weight.grad[idx]);
            }
            for idx in [0usize, 17, 63] {
                let mut xp = x.clone();
                xp.data_mut()[idx] += eps;
                let lp = loss(&mut conv, &xp);
                let mut xm = x.clone();
                xm.data_mut()[idx] -= eps;
                let lm = loss(&mut conv, &xm);
                let fd = (lp - lm) / (2.0 * f64::from(eps));
                assert!((fd - f64::from(dx.data()[idx])).abs() < 1e-3, "dx {fd} vs {}", dx.data()[idx]);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut rng = rng_from_seed(0);
        let mut conv = Conv2d::new("c", 3, 4, 3, 1, 1, &mut rng);
        assert!(conv.forward(&Tensor::zeros(&[1, 2, 4, 4]), false).is_err());
        assert!(conv.backward(&Tensor::zeros(&[1, 4, 4, 4]), false).is_err());
    }
}
