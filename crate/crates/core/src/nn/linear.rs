use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{Param, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Affine map `y = x W^T + b` over `[N, in]` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    in_features: usize,
    out_features: usize,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_features as f32).sqrt();
        Linear {
            weight: Param::uniform(format!("{name}.weight"), &[out_features, in_features], bound, true, rng),
            bias: Param::uniform(format!("{name}.bias"), &[out_features], bound, false, rng),
            in_features,
            out_features,
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn forward(&mut self, x: &Tensor, record: bool) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        if d != self.in_features {
            return Err(Error::shape(format!(
                "{}: {d} input features, expected {}",
                self.weight.name, self.in_features
            )));
        }
        let mut out = Tensor::zeros(&[n, self.out_features]);
        for row in out.data_mut().chunks_exact_mut(self.out_features) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm_nt(n, d, self.out_features, x.data(), &self.weight.value, 1.0, out.data_mut());
        self.input = if record { Some(x.clone()) } else { None };
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::shape(format!("{}: backward without a recorded forward", self.weight.name)))?;
        let (n, _) = x.dims2()?;
        if dy.shape() != [n, self.out_features] {
            return Err(Error::shape(format!("{}: gradient shape mismatch", self.weight.name)));
        }
        gemm_tn(self.out_features, n, self.in_features, dy.data(), x.data(), 1.0, &mut self.weight.grad);
        for row in dy.data().chunks_exact(self.out_features) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(&[n, self.in_features]);
        gemm_nn(n, self.out_features, self.in_features, dy.data(), &self.weight.value, 0.0, dx.data_mut());
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }
}
