//! Jigsaw puzzles: window crop, per-cell tile jitter, permutation reorder and
//! channel stacking.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{LevelPayload, PretextSample, SampleMeta};
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::rng::Rng;
use crate::tasks::permutation::Permutation;
use crate::tasks::TaskLevelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JigsawGeometry {
    pub window: usize,
    pub grid: usize,
    pub cell: usize,
    pub tile: usize,
    /// Standardize each tile to zero mean and unit variance.
    #[serde(default = "default_true")]
    pub normalize_tiles: bool,
}

fn default_true() -> bool {
    true
}

impl JigsawGeometry {
    /// 225-pixel window, 3x3 grid of 75-pixel cells, 64-pixel tiles.
    pub const FULL: JigsawGeometry = JigsawGeometry {
        window: 225,
        grid: 3,
        cell: 75,
        tile: 64,
        normalize_tiles: true,
    };

    /// Scaled-down geometry for small images.
    pub const DESK: JigsawGeometry = JigsawGeometry {
        window: 96,
        grid: 3,
        cell: 32,
        tile: 24,
        normalize_tiles: true,
    };

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(Error::invalid(format!("jigsaw grid {} must be at least 2", self.grid)));
        }
        if self.grid * self.cell != self.window {
            return Err(Error::invalid(format!(
                "grid {} x cell {} != window {}",
                self.grid, self.cell, self.window
            )));
        }
        if self.tile == 0 || self.tile > self.cell {
            return Err(Error::invalid(format!("tile {} must lie in 1..={}", self.tile, self.cell)));
        }
        Ok(())
    }
}

impl Default for JigsawGeometry {
    fn default() -> Self {
        JigsawGeometry::FULL
    }
}

/// Randomly placed window and per-cell tile offsets for one puzzle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JigsawDraw {
    pub window_top: usize,
    pub window_left: usize,
    /// `(dy, dx)` of the tile inside each cell, raster order.
    pub tile_offsets: Vec<(usize, usize)>,
    pub permutation_index: usize,
}

impl JigsawDraw {
    pub fn sample(image: &Image, geometry: &JigsawGeometry, set_len: usize, rng: &mut Rng) -> Result<Self> {
        geometry.validate()?;
        if image.height() < geometry.window || image.width() < geometry.window {
            return Err(Error::invalid(format!(
                "image {}x{} smaller than jigsaw window {}",
                image.height(),
                image.width(),
                geometry.window
            )));
        }
        let window_top = rng.gen_range(0..=image.height() - geometry.window);
        let window_left = rng.gen_range(0..=image.width() - geometry.window);
        let slack = geometry.cell - geometry.tile;
        let tile_offsets = (0..geometry.cells())
            .map(|_| (rng.gen_range(0..=slack), rng.gen_range(0..=slack)))
            .collect();
        let permutation_index = rng.gen_range(0..set_len);
        Ok(JigsawDraw {
            window_top,
            window_left,
            tile_offsets,
            permutation_index,
        })
    }
}

/// Cuts the tiles described by `draw` and stacks them along channels in the
/// order given by `permutation`: output slot `j` holds tile `permutation[j]`.
pub fn assemble_puzzle(
    image: &Image,
    geometry: &JigsawGeometry,
    draw: &JigsawDraw,
    permutation: &Permutation,
) -> Result<Image> {
    geometry.validate()?;
    if permutation.len() != geometry.cells() {
        return Err(Error::shape(format!(
            "permutation over {} elements for a {}-cell grid",
            permutation.len(),
            geometry.cells()
        )));
    }
    let c = image.channels();
    let t = geometry.tile;
    let plane = t * t;
    let mut out = Vec::with_capacity(geometry.cells() * c * plane);
    for &src in permutation.as_slice() {
        let src = src as usize;
        let (row, col) = (src / geometry.grid, src % geometry.grid);
        let (dy, dx) = draw.tile_offsets[src];
        let top = draw.window_top + row * geometry.cell + dy;
        let left = draw.window_left + col * geometry.cell + dx;
        let mut tile = image.crop(top, left, t, t)?.into_vec();
        if geometry.normalize_tiles {
            standardize(&mut tile);
        }
        out.extend_from_slice(&tile);
    }
    Image::from_vec(geometry.cells() * c, t, t, out)
}

/// Rescales `values` in place to zero mean and unit variance.
pub fn standardize(values: &mut [f32]) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = values.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt().max(1e-6);
    for v in values {
        *v = ((f64::from(*v) - mean) * inv) as f32;
    }
}

pub fn make_jigsaw_sample(
    image: &Image,
    level: &TaskLevelSpec,
    geometry: &JigsawGeometry,
    rng: &mut Rng,
    meta: SampleMeta,
) -> Result<PretextSample> {
    let set = match &level.payload {
        LevelPayload::Jigsaw(set) => set,
        _ => return Err(Error::invalid("jigsaw sample requested from a non-jigsaw level")),
    };
    if set.n_elements() != geometry.cells() {
        return Err(Error::shape(format!(
            "permutation set over {} elements for a {}-cell grid",
            set.n_elements(),
            geometry.cells()
        )));
    }
    let draw = JigsawDraw::sample(image, geometry, set.len(), rng)?;
    let perm = set.get(draw.permutation_index).expect("index drawn within set");
    Ok(PretextSample {
        input: assemble_puzzle(image, geometry, &draw, perm)?,
        label: draw.permutation_index,
        meta,
    })
}
