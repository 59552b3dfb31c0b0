//! Block-structured residual backbone.
//!
//! Every block groups the layers that share one output resolution: block 1
//! owns the stem, and each later block opens with an (optionally strided)
//! residual unit. Blocks are the unit of stage partitioning and of parameter
//! grouping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_forward, BatchNorm2d, Buffer, Conv2d, Mode, Param, Tensor};
use crate::partition::BlockSpec;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    /// Residual units in the block.
    pub units: usize,
    /// Output channels.
    pub width: usize,
    /// First unit halves the spatial resolution.
    pub downsample: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_channels: usize,
    /// Spatial side of the (square) network input.
    pub input_size: usize,
    pub stem_width: usize,
    pub blocks: Vec<BlockConfig>,
    pub seed: u64,
}

impl Default for BackboneConfig {
    /// Five blocks with widths 16..256, four of which downsample.
    fn default() -> Self {
        let widths = [16, 32, 64, 128, 256];
        BackboneConfig {
            input_channels: 3,
            input_size: 32,
            stem_width: 16,
            blocks: widths
                .iter()
                .enumerate()
                .map(|(i, &width)| BlockConfig {
                    units: 1,
                    width,
                    downsample: i > 0,
                })
                .collect(),
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn with_widths(widths: &[usize]) -> Self {
        let mut cfg = BackboneConfig {
            stem_width: widths.first().copied().unwrap_or(16),
            ..BackboneConfig::default()
        };
        cfg.blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &width)| BlockConfig {
                units: 1,
                width,
                downsample: i > 0,
            })
            .collect();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.stem_width == 0 || self.input_size == 0 {
            return Err(Error::invalid("input channels, input size and stem width must be positive"));
        }
        if self.blocks.is_empty() {
            return Err(Error::invalid("backbone needs at least one block"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.width == 0 {
                return Err(Error::invalid(format!("block B{} has zero width", i + 1)));
            }
            if i == 0 {
                if b.downsample {
                    return Err(Error::invalid(
                        "block B1 holds the full-resolution stem and cannot downsample",
                    ));
                }
                if b.units == 0 && b.width != self.stem_width {
                    return Err(Error::invalid(format!(
                        "block B1 has no units, so its width {} must equal the stem width {}",
                        b.width, self.stem_width
                    )));
                }
            } else if b.units == 0 {
                return Err(Error::invalid(format!("block B{} needs at least one residual unit", i + 1)));
            }
        }
        Ok(())
    }

    /// Output side of every block for the configured input size.
    pub fn block_resolutions(&self) -> Vec<usize> {
        let mut side = self.input_size;
        self.blocks
            .iter()
            .map(|b| {
                if b.downsample {
                    // 3x3, stride 2, padding 1
                    side = (side + 2 - 3) / 2 + 1;
                }
                side
            })
            .collect()
    }

    pub fn block_name(index: usize) -> String {
        format!("B{}", index + 1)
    }
}

#[derive(Debug, Clone)]
struct Stem {
    conv: Conv2d,
    bn: BatchNorm2d,
    out: Option<Tensor>,
}

impl Stem {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let record = mode == Mode::Train;
        let mut y = self.bn.forward(&self.conv.forward(x, record)?, mode)?;
        relu_forward(&mut y);
        self.out = record.then(|| y.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>> {
        let out = self.out.take().ok_or_else(|| Error::shape("stem backward without forward"))?;
        let mut g = dy.clone();
        relu_backward(&mut g, &out);
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g, need_input_grad)
    }
}

#[derive(Debug, Clone)]
struct ResidualUnit {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
    mid: Option<Tensor>,
    out: Option<Tensor>,
}

impl ResidualUnit {
    fn new(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut Rng) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(&format!("{name}.shortcut.conv"), cin, cout, 1, stride, 0, rng),
                BatchNorm2d::new(&format!("{name}.shortcut.bn"), cout),
            )
        });
        ResidualUnit {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, stride, 1, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), cout),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), cout),
            shortcut,
            mid: None,
            out: None,
        }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let record = mode == Mode::Train;
        let mut mid = self.bn1.forward(&self.conv1.forward(x, record)?, mode)?;
        relu_forward(&mut mid);
        let mut out = self.bn2.forward(&self.conv2.forward(&mid, record)?, mode)?;
        match self.shortcut.as_mut() {
            Some((conv, bn)) => out.add_assign(&bn.forward(&conv.forward(x, record)?, mode)?),
            None => out.add_assign(x),
        }
        relu_forward(&mut out);
        if record {
            self.mid = Some(mid);
            self.out = Some(out.clone());
        } else {
            self.mid = None;
            self.out = None;
        }
        Ok(out)
    }

    fn backward(&mut self, dy: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>> {
        let out = self.out.take().ok_or_else(|| Error::shape("unit backward without forward"))?;
        let mid = self.mid.take().ok_or_else(|| Error::shape("unit backward without forward"))?;
        let mut g = dy.clone();
        relu_backward(&mut g, &out);
        let mut gm = self.conv2.backward(&self.bn2.backward(&g)?, true)?.expect("input grad requested");
        relu_backward(&mut gm, &mid);
        let dx_main = self.conv1.backward(&self.bn1.backward(&gm)?, need_input_grad)?;
        let dx_short = match self.shortcut.as_mut() {
            Some((conv, bn)) => conv.backward(&bn.backward(&g)?, need_input_grad)?,
            None => need_input_grad.then_some(g),
        };
        Ok(match (dx_main, dx_short) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        })
    }

    fn layers_mut(&mut self) -> (Vec<&mut Conv2d>, Vec<&mut BatchNorm2d>) {
        let mut convs = vec![&mut self.conv1, &mut self.conv2];
        let mut bns = vec![&mut self.bn1, &mut self.bn2];
        if let Some((c, b)) = self.shortcut.as_mut() {
            convs.push(c);
            bns.push(b);
        }
        (convs, bns)
    }
}

/// One resolution block: optional stem plus residual units.
#[derive(Debug, Clone)]
pub struct Block {
    name: String,
    stem: Option<Stem>,
    units: Vec<ResidualUnit>,
    out_channels: usize,
}

impl Block {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = match self.stem.as_mut() {
            Some(stem) => stem.forward(x, mode)?,
            None => x.clone(),
        };
        for unit in &mut self.units {
            h = unit.forward(&h, mode)?;
        }
        Ok(h)
    }

    /// Backpropagates through the block; the input gradient is produced only
    /// when requested.
    pub fn backward(&mut self, dy: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>> {
        let mut g = dy.clone();
        let n_units = self.units.len();
        for (i, unit) in self.units.iter_mut().enumerate().rev() {
            let first_layer = i == 0 && self.stem.is_none();
            let need = !first_layer || need_input_grad;
            match unit.backward(&g, need)? {
                Some(next) => g = next,
                None => {
                    debug_assert!(first_layer);
                    return Ok(None);
                }
            }
        }
        match self.stem.as_mut() {
            Some(stem) => stem.backward(&g, need_input_grad),
            None if n_units == 0 || need_input_grad => Ok(Some(g)),
            None => Ok(None),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        if let Some(stem) = self.stem.as_mut() {
            out.push(&mut stem.conv.weight);
            out.push(&mut stem.bn.gamma);
            out.push(&mut stem.bn.beta);
        }
        for unit in &mut self.units {
            let (convs, bns) = unit.layers_mut();
            for c in convs {
                out.push(&mut c.weight);
            }
            for b in bns {
                out.push(&mut b.gamma);
                out.push(&mut b.beta);
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        let mut out = Vec::new();
        if let Some(stem) = self.stem.as_mut() {
            out.push(&mut stem.bn.running_mean);
            out.push(&mut stem.bn.running_var);
        }
        for unit in &mut self.units {
            let (_, bns) = unit.layers_mut();
            for b in bns {
                out.push(&mut b.running_mean);
                out.push(&mut b.running_var);
            }
        }
        out
    }

    pub fn clear_cache(&mut self) {
        if let Some(stem) = self.stem.as_mut() {
            stem.conv.clear_cache();
            stem.bn.clear_cache();
            stem.out = None;
        }
        for unit in &mut self.units {
            let (convs, bns) = unit.layers_mut();
            convs.into_iter().for_each(Conv2d::clear_cache);
            bns.into_iter().for_each(BatchNorm2d::clear_cache);
            unit.mid = None;
            unit.out = None;
        }
    }
}

/// The feature extractor `f`: a chain of resolution blocks.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    blocks: Vec<Block>,
}

/// Builds the backbone and its block descriptors, checking the descriptors
/// against a dry forward pass.
pub fn build_backbone(config: &BackboneConfig) -> Result<(Backbone, Vec<BlockSpec>)> {
    let mut backbone = Backbone::new(config)?;
    let specs = backbone.block_specs();
    let probe = Tensor::zeros(&[1, config.input_channels, config.input_size, config.input_size]);
    let traced = backbone.trace_shapes(&probe)?;
    for (spec, shape) in specs.iter().zip(&traced) {
        if shape[2] != spec.output_resolution || shape[3] != spec.output_resolution {
            return Err(Error::shape(format!(
                "{}: dry run produced {shape:?}, expected side {}",
                spec.name, spec.output_resolution
            )));
        }
    }
    Ok((backbone, specs))
}

impl Backbone {
    pub fn new(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::child_rng(config.seed, &[0xb0b0]);
        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut cin = config.input_channels;
        for (i, bc) in config.blocks.iter().enumerate() {
            let name = BackboneConfig::block_name(i);
            let stem = (i == 0).then(|| {
                let s = Stem {
                    conv: Conv2d::new(&format!("{name}.stem.conv"), cin, config.stem_width, 3, 1, 1, &mut rng),
                    bn: BatchNorm2d::new(&format!("{name}.stem.bn"), config.stem_width),
                    out: None,
                };
                cin = config.stem_width;
                s
            });
            let mut units = Vec::with_capacity(bc.units);
            for u in 0..bc.units {
                let stride = if u == 0 && bc.downsample { 2 } else { 1 };
                units.push(ResidualUnit::new(&format!("{name}.unit{u}"), cin, bc.width, stride, &mut rng));
                cin = bc.width;
            }
            blocks.push(Block {
                name,
                stem,
                units,
                out_channels: cin,
            });
        }
        Ok(Backbone {
            config: config.clone(),
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, index: usize) -> &Block {
        &self.blocks[index]
    }

    pub fn block_mut(&mut self, index: usize) -> &mut Block {
        &mut self.blocks[index]
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn block_specs(&self) -> Vec<BlockSpec> {
        self.config
            .block_resolutions()
            .into_iter()
            .enumerate()
            .map(|(i, res)| BlockSpec {
                index: i + 1,
                name: self.blocks[i].name.clone(),
                output_resolution: res,
                channels: self.blocks[i].out_channels,
                param_group_id: self.blocks[i].name.clone(),
            })
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.input_channels || h != self.config.input_size || w != self.config.input_size {
            return Err(Error::shape(format!(
                "batch of [{c}, {h}, {w}] inputs, backbone expects [{}, {s}, {s}]",
                self.config.input_channels,
                s = self.config.input_size
            )));
        }
        Ok(())
    }

    fn trace_shapes(&mut self, x: &Tensor) -> Result<Vec<Vec<usize>>> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut shapes = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            h = block.forward(&h, Mode::Eval)?;
            shapes.push(h.shape().to_vec());
        }
        Ok(shapes)
    }

    /// Runs blocks `0..=last`. Blocks before `train_from` run in evaluation
    /// mode and record nothing; the rest run in training mode. With
    /// `train_from = None` the whole pass is evaluation-only.
    pub fn forward_to(&mut self, x: &Tensor, last: usize, train_from: Option<usize>) -> Result<Tensor> {
        self.check_input(x)?;
        if last >= self.blocks.len() {
            return Err(Error::invalid(format!("block index {last} out of range")));
        }
        let mut h = x.clone();
        for (i, block) in self.blocks[..=last].iter_mut().enumerate() {
            let mode = match train_from {
                Some(start) if i >= start => Mode::Train,
                _ => Mode::Eval,
            };
            h = block.forward(&h, mode)?;
        }
        Ok(h)
    }

    /// Backpropagates `dy` from block `last` down to block `first`, which
    /// must all have been run in training mode by the preceding forward.
    pub fn backward_range(&mut self, dy: &Tensor, first: usize, last: usize) -> Result<()> {
        let mut g = dy.clone();
        for i in (first..=last).rev() {
            match self.blocks[i].backward(&g, i > first)? {
                Some(next) => g = next,
                None => break,
            }
        }
        Ok(())
    }

    /// Evaluation-mode features after block `index`.
    pub fn features(&mut self, x: &Tensor, index: usize) -> Result<Tensor> {
        self.forward_to(x, index, None)
    }

    pub fn clear_caches(&mut self) {
        self.blocks.iter_mut().for_each(Block::clear_cache);
    }

    /// Visits every parameter with its group id.
    pub fn for_each_param(&mut self, mut f: impl FnMut(&str, &mut Param)) {
        for block in &mut self.blocks {
            let group = block.name.clone();
            for p in block.params_mut() {
                f(&group, p);
            }
        }
    }

    pub fn for_each_buffer(&mut self, mut f: impl FnMut(&str, &mut Buffer)) {
        for block in &mut self.blocks {
            let group = block.name.clone();
            for b in block.buffers_mut() {
                f(&group, b);
            }
        }
    }

    /// Flattened copy of all parameter and buffer values in a fixed order.
    pub fn snapshot(&mut self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        self.for_each_param(|_, p| out.push((p.name.clone(), p.value.clone())));
        self.for_each_buffer(|_, b| out.push((b.name.clone(), b.value.clone())));
        out
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, p| n += p.value.len());
        n
    }

    /// `(name, shape)` of every parameter and buffer; two backbones can load
    /// each other's state iff these agree.
    pub fn fingerprint(&mut self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.for_each_param(|_, p| out.push((p.name.clone(), p.shape.clone())));
        self.for_each_buffer(|_, b| out.push((b.name.clone(), vec![b.value.len()])));
        out
    }
}
