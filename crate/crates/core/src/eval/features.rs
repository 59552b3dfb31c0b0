use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Backbone, BackboneConfig};
use crate::nn::{global_avg_pool, Tensor};
use crate::partition::StagePartition;
use crate::raster::Image;
use crate::tasks::jigsaw::standardize;

const MAGIC: &[u8; 8] = b"PSLFEAT\0";
const VERSION: u32 = 1;
const EXTRACT_BATCH: usize = 64;

/// Pooled features of one block, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub block: String,
    pub dim: usize,
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// `PSLFEAT\0`, u32 version, u32 name length, name, u64 rows, u64 dim,
    /// rows × u32 labels, rows × dim × f32 features; little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.block.len() + 4 * (self.labels.len() + self.features.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.block.len() as u32).to_le_bytes());
        out.extend_from_slice(self.block.as_bytes());
        out.extend_from_slice(&(self.labels.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "feature table";
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::format(WHAT, "truncated"))?;
            let s = &bytes[at..end];
            at = end;
            Ok(s)
        };
        if take(8)? != MAGIC {
            return Err(Error::format(WHAT, "missing magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::format(WHAT, format!("unsupported version {version}")));
        }
        let name_len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let block = std::str::from_utf8(take(name_len)?)
            .map_err(|_| Error::format(WHAT, "block name is not UTF-8"))?
            .to_string();
        let rows = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let dim = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let cells = rows.checked_mul(dim).and_then(|c| c.checked_mul(4));
        let needed = rows.checked_mul(4).zip(cells).and_then(|(a, b)| a.checked_add(b));
        let remaining = (bytes.len() - 32 - name_len) as u64;
        if needed != Some(remaining) {
            return Err(Error::format(WHAT, format!("{rows} rows of width {dim} do not match {remaining} payload bytes")));
        }
        let (rows, dim) = (rows as usize, dim as usize);
        let labels = take(rows * 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let features = take(rows * dim * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(FeatureTable {
            block,
            dim,
            features,
            labels,
        })
    }
}

/// Prepares a dataset image for a backbone: center-square, resize to the
/// input side and, for backbones trained on channel-stacked jigsaw tiles,
/// standardize and replicate across the tile slots.
pub fn adapt_image(image: &Image, config: &BackboneConfig) -> Result<Image> {
    let side = config.input_size;
    let s = image.height().min(image.width());
    let mut img = image.center_crop(s, s)?;
    if s != side {
        img = img.resize_bilinear(side, side)?;
    }
    let c = img.channels();
    if config.input_channels == c {
        return Ok(img);
    }
    if !config.input_channels.is_multiple_of(c) {
        return Err(Error::shape(format!(
            "cannot feed {c}-channel images to a {}-channel backbone",
            config.input_channels
        )));
    }
    let mut data = img.into_vec();
    standardize(&mut data);
    let copies = config.input_channels / c;
    let stacked: Vec<f32> = std::iter::repeat_n(data, copies).flatten().collect();
    Image::from_vec(config.input_channels, side, side, stacked)
}

pub fn batch_tensor(data: &Dataset, indices: &[usize], config: &BackboneConfig) -> Result<Tensor> {
    let images = indices
        .iter()
        .map(|&i| adapt_image(&data.image(i), config))
        .collect::<Result<Vec<_>>>()?;
    let slices: Vec<&[f32]> = images.iter().map(Image::data).collect();
    Tensor::stack(&slices, &[config.input_channels, config.input_size, config.input_size])
}

/// Evaluation-mode features after `block_name`, globally average-pooled.
pub fn extract_block_features(
    backbone: &mut Backbone,
    partition: &StagePartition,
    block_name: &str,
    data: &Dataset,
) -> Result<FeatureTable> {
    let spec = partition.block_by_name(block_name)?;
    let index = backbone
        .block_index(&spec.name)
        .ok_or_else(|| Error::invalid(format!("backbone has no block `{block_name}`")))?;
    let dim = backbone.block(index).out_channels();
    let config = backbone.config().clone();
    let mut features = Vec::with_capacity(data.len() * dim);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EXTRACT_BATCH) {
        let x = batch_tensor(data, chunk, &config)?;
        let h = backbone.features(&x, index)?;
        features.extend_from_slice(global_avg_pool(&h)?.data());
    }
    Ok(FeatureTable {
        block: spec.name.clone(),
        dim,
        features,
        labels: data.labels().to_vec(),
    })
}
