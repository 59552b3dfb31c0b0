use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, global_avg_pool_backward, Linear, Param, Tensor};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    LinearClassifier,
    MlpProjection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub in_features: usize,
    pub out_dim: usize,
    /// Hidden width of the projection MLP; ignored for classifiers.
    pub hidden_dim: usize,
}

impl HeadConfig {
    pub fn classifier(in_features: usize, classes: usize) -> Self {
        HeadConfig {
            kind: HeadKind::LinearClassifier,
            in_features,
            out_dim: classes,
            hidden_dim: 0,
        }
    }

    /// Two-layer projection to a 128-d space, hidden width = input width.
    pub fn projection(in_features: usize) -> Self {
        HeadConfig {
            kind: HeadKind::MlpProjection,
            in_features,
            out_dim: 128,
            hidden_dim: in_features,
        }
    }
}

/// Global average pooling followed by one or two affine layers.
#[derive(Debug, Clone)]
pub struct Head {
    id: String,
    config: HeadConfig,
    fc1: Linear,
    fc2: Option<Linear>,
    hidden: Option<Tensor>,
    spatial: Option<(usize, usize)>,
}

pub fn build_head(id: &str, config: &HeadConfig, rng: &mut Rng) -> Result<Head> {
    if config.in_features == 0 || config.out_dim == 0 {
        return Err(Error::invalid(format!("head `{id}` needs positive input and output widths")));
    }
    let (fc1, fc2) = match config.kind {
        HeadKind::LinearClassifier => (Linear::new(&format!("{id}.fc"), config.in_features, config.out_dim, rng), None),
        HeadKind::MlpProjection => {
            if config.hidden_dim == 0 {
                return Err(Error::invalid(format!("projection head `{id}` needs a hidden width")));
            }
            (
                Linear::new(&format!("{id}.fc1"), config.in_features, config.hidden_dim, rng),
                Some(Linear::new(&format!("{id}.fc2"), config.hidden_dim, config.out_dim, rng)),
            )
        }
    };
    Ok(Head {
        id: id.to_string(),
        config: config.clone(),
        fc1,
        fc2,
        hidden: None,
        spatial: None,
    })
}

impl Head {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    /// `[N, C, H, W]` block features to `[N, out_dim]`.
    pub fn forward(&mut self, features: &Tensor, record: bool) -> Result<Tensor> {
        let (_, c, h, w) = features.dims4()?;
        if c != self.config.in_features {
            return Err(Error::shape(format!(
                "head `{}` expects {} feature channels, got {c}",
                self.id, self.config.in_features
            )));
        }
        let pooled = global_avg_pool(features)?;
        let mut z = self.fc1.forward(&pooled, record)?;
        if let Some(fc2) = self.fc2.as_mut() {
            z.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            self.hidden = record.then(|| z.clone());
            z = fc2.forward(&z, record)?;
        }
        self.spatial = record.then_some((h, w));
        Ok(z)
    }

    /// Returns the gradient with respect to the unpooled block features.
    pub fn backward(&mut self, dz: &Tensor) -> Result<Tensor> {
        let (h, w) = self
            .spatial
            .take()
            .ok_or_else(|| Error::shape(format!("head `{}` backward without forward", self.id)))?;
        let mut g = dz.clone();
        if let Some(fc2) = self.fc2.as_mut() {
            g = fc2.backward(&g)?;
            let hidden = self.hidden.take().expect("recorded with spatial");
            for (gv, hv) in g.data_mut().iter_mut().zip(hidden.data()) {
                if *hv <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let g = self.fc1.backward(&g)?;
        global_avg_pool_backward(&g, h, w)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.fc1.weight, &mut self.fc1.bias];
        if let Some(fc2) = self.fc2.as_mut() {
            out.push(&mut fc2.weight);
            out.push(&mut fc2.bias);
        }
        out
    }

    pub fn clear_cache(&mut self) {
        self.fc1.clear_cache();
        if let Some(fc2) = self.fc2.as_mut() {
            fc2.clear_cache();
        }
        self.hidden = None;
        self.spatial = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn output_dimensions() {
        let mut rng = rng_from_seed(0);
        let mut h = build_head("g3", &HeadConfig::classifier(256, 2000), &mut rng).unwrap();
        assert_eq!(h.forward(&Tensor::zeros(&[2, 256, 2, 2]), false).unwrap().shape(), &[2, 2000]);
        let mut p = build_head("g", &HeadConfig::projection(256), &mut rng).unwrap();
        assert_eq!(p.forward(&Tensor::zeros(&[3, 256, 1, 1]), false).unwrap().shape(), &[3, 128]);
        assert_eq!(p.params_mut().len(), 4);
        assert!(h.forward(&Tensor::zeros(&[1, 128, 2, 2]), false).is_err());
    }

    #[test]
    fn spatial_size_does_not_matter_for_constant_maps() {
        let mut rng = rng_from_seed(1);
        let mut h = build_head("g", &HeadConfig::projection(4), &mut rng).unwrap();
        let small = Tensor::from_vec(&[1, 4, 1, 1], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let big = Tensor::from_vec(&[1, 4, 3, 3], [0.5, -1.0, 2.0, 0.0].iter().flat_map(|&v| [v; 9]).collect()).unwrap();
        assert_eq!(h.forward(&small, false).unwrap(), h.forward(&big, false).unwrap());
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = rng_from_seed(2);
        let mut h = build_head("g", &HeadConfig { hidden_dim: 5, ..HeadConfig::projection(3) }, &mut rng).unwrap();
        let x = Tensor::from_vec(&[2, 3, 2, 2], (0..24).map(|v| ((v * 7) % 11) as f32 / 11.0 - 0.3).collect()).unwrap();
        let z = h.forward(&x, true).unwrap();
        let r: Vec<f32> = (0..z.len()).map(|i| ((i * 3) % 7) as f32 / 7.0 - 0.5).collect();
        let dx = h.backward(&Tensor::from_vec(z.shape(), r.clone()).unwrap()).unwrap();
        let loss = |x: &Tensor| -> f64 {
            let z = h.clone().forward(x, false).unwrap();
            z.data().iter().zip(&r).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()
        };
        let eps = 1e-3f32;
        for idx in [0, 7, 23] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * f64::from(eps));
            assert!((fd - f64::from(dx.data()[idx])).abs() < 1e-3);
        }
    }
}
