//! Turns dataset images into pretext-task minibatches.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::raster::Image;
use crate::rng;
use crate::tasks::{
    make_contrastive_pair, make_jigsaw_sample, make_rotation_sample, JigsawGeometry, LevelPayload, SampleMeta,
    TaskLevelSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretextConfig {
    pub jigsaw: JigsawGeometry,
    /// Shorter side the source is resized to before the jigsaw window crop.
    pub jigsaw_resize: usize,
    /// Side of rotation inputs; sources are resized to it.
    pub image_size: usize,
}

impl PretextConfig {
    pub fn desk(image_size: usize) -> Self {
        PretextConfig {
            jigsaw: JigsawGeometry::DESK,
            jigsaw_resize: 110,
            image_size,
        }
    }

    pub fn full() -> Self {
        PretextConfig {
            jigsaw: JigsawGeometry::FULL,
            jigsaw_resize: 256,
            image_size: 224,
        }
    }

    /// `(channels, side)` of the network input for a level over sources
    /// with `source_channels` channels.
    pub fn input_shape(&self, level: &TaskLevelSpec, source_channels: usize) -> (usize, usize) {
        match &level.payload {
            LevelPayload::Jigsaw(_) => (self.jigsaw.cells() * source_channels, self.jigsaw.tile),
            LevelPayload::Rotation(_) => (source_channels, self.image_size),
            LevelPayload::Contrastive(p) => (source_channels, p.size),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Rows `2k` and `2k + 1` are two views of one source.
    Pairs,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub input: Tensor,
    pub targets: Targets,
}

fn square(image: Image, side: usize) -> Result<Image> {
    if image.height() == side && image.width() == side {
        Ok(image)
    } else {
        let s = image.height().min(image.width());
        image
            .center_crop(s, s)?
            .resize_bilinear(side, side)
    }
}

/// Builds one minibatch; sample `k` draws from a generator seeded with
/// `seeds[k]`, so the batch is independent of worker scheduling.
pub fn build_batch(
    level: &TaskLevelSpec,
    config: &PretextConfig,
    data: &Dataset,
    indices: &[usize],
    seeds: &[u64],
) -> Result<Batch> {
    if indices.len() != seeds.len() || indices.is_empty() {
        return Err(Error::invalid("batch needs one seed per index"));
    }
    let samples: Vec<Result<(Vec<Image>, usize)>> = indices
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(&idx, &seed)| {
            let image = data.image(idx);
            let mut r = rng::rng_from_seed(seed);
            let meta = SampleMeta {
                source_id: idx as u64,
                seed,
            };
            match &level.payload {
                LevelPayload::Rotation(_) => {
                    let s = make_rotation_sample(&square(image, config.image_size)?, level, &mut r, meta)?;
                    Ok((vec![s.input], s.label))
                }
                LevelPayload::Jigsaw(_) => {
                    let resized = image.resize_shorter_side(config.jigsaw_resize)?;
                    let s = make_jigsaw_sample(&resized, level, &config.jigsaw, &mut r, meta)?;
                    Ok((vec![s.input], s.label))
                }
                LevelPayload::Contrastive(pipeline) => {
                    let (a, b) = make_contrastive_pair(&image, pipeline, &mut r)?;
                    Ok((vec![a, b], 0))
                }
            }
        })
        .collect();
    let mut images = Vec::with_capacity(indices.len() * 2);
    let mut labels = Vec::with_capacity(indices.len());
    for s in samples {
        let (views, label) = s?;
        images.extend(views);
        labels.push(label);
    }
    let shape = images[0].shape();
    let slices: Vec<&[f32]> = images.iter().map(Image::data).collect();
    let input = Tensor::stack(&slices, &shape)?;
    let targets = match level.payload {
        LevelPayload::Contrastive(_) => Targets::Pairs,
        _ => Targets::Classes(labels),
    };
    Ok(Batch { input, targets })
}
