//! Rotation prediction: nested angle sets and sample construction.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{LevelPayload, PretextSample, SampleMeta, TaskFamily, TaskLevelSpec};
use crate::error::{Error, Result};
use crate::raster::{inscribed_square_side, Image};
use crate::rng::Rng;

/// Ascending, distinct rotation angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct RotationSet {
    angles_deg: Vec<u32>,
}

impl TryFrom<Vec<u32>> for RotationSet {
    type Error = Error;

    fn try_from(angles: Vec<u32>) -> Result<Self> {
        RotationSet::new(angles)
    }
}

impl From<RotationSet> for Vec<u32> {
    fn from(set: RotationSet) -> Self {
        set.angles_deg
    }
}

impl RotationSet {
    pub fn new(mut angles_deg: Vec<u32>) -> Result<Self> {
        if angles_deg.is_empty() {
            return Err(Error::invalid("rotation set must not be empty"));
        }
        angles_deg.sort_unstable();
        if angles_deg.windows(2).any(|w| w[0] == w[1]) || angles_deg.iter().any(|&a| a >= 360) {
            return Err(Error::invalid(format!(
                "rotation angles {angles_deg:?} must be distinct and in [0, 360)"
            )));
        }
        Ok(RotationSet { angles_deg })
    }

    /// All multiples of `base_deg` in `[0, 360)`.
    pub fn multiples_of(base_deg: u32) -> Result<Self> {
        if base_deg == 0 || 360 % base_deg != 0 {
            return Err(Error::invalid(format!("angle base {base_deg} must divide 360")));
        }
        Self::new((0..360 / base_deg).map(|i| i * base_deg).collect())
    }

    pub fn angles(&self) -> &[u32] {
        &self.angles_deg
    }

    pub fn len(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles_deg.is_empty()
    }

    pub fn index_of(&self, angle: u32) -> Option<usize> {
        self.angles_deg.binary_search(&angle).ok()
    }

    pub fn is_subset_of(&self, other: &RotationSet) -> bool {
        self.angles_deg.iter().all(|a| other.index_of(*a).is_some())
    }
}

/// The three default levels: angle bases 180, 90 and 45 degrees.
pub fn rotation_levels() -> Vec<TaskLevelSpec> {
    [180, 90, 45]
        .into_iter()
        .enumerate()
        .map(|(i, base)| {
            let set = RotationSet::multiples_of(base).expect("divides 360");
            TaskLevelSpec::new(TaskFamily::Rotation, i as u8 + 1, LevelPayload::Rotation(set))
                .expect("valid level")
        })
        .collect()
}

/// Rotates counter-clockwise by `angle_deg`. Multiples of 90 use an exact
/// pixel remap; any other angle is resampled bilinearly, center-cropped to the
/// inscribed square so no border pixels survive, then resized back.
pub fn rotate_image(image: &Image, angle_deg: u32) -> Result<Image> {
    let angle = angle_deg % 360;
    if angle.is_multiple_of(90) {
        return Ok(image.rotate90((angle / 90) as usize));
    }
    if image.height() != image.width() {
        return Err(Error::shape(format!(
            "arbitrary-angle rotation needs a square image, got {}x{}",
            image.height(),
            image.width()
        )));
    }
    let side = image.height();
    let rotated = image.rotate_bilinear(angle as f32);
    let inner = inscribed_square_side(side, angle as f32);
    rotated.center_crop(inner, inner)?.resize_bilinear(side, side)
}

/// Builds a rotation sample whose label is the index of `angle_deg` in the
/// level's angle set.
pub fn rotation_sample_with_angle(
    image: &Image,
    level: &TaskLevelSpec,
    angle_deg: u32,
    meta: SampleMeta,
) -> Result<PretextSample> {
    let set = match &level.payload {
        LevelPayload::Rotation(set) => set,
        _ => return Err(Error::invalid("rotation sample requested from a non-rotation level")),
    };
    let label = set.index_of(angle_deg).ok_or_else(|| {
        Error::invalid(format!("angle {angle_deg} is not in level set {:?}", set.angles()))
    })?;
    Ok(PretextSample {
        input: rotate_image(image, angle_deg)?,
        label,
        meta,
    })
}

/// Draws an angle uniformly from the level set and rotates the image by it.
pub fn make_rotation_sample(image: &Image, level: &TaskLevelSpec, rng: &mut Rng, meta: SampleMeta) -> Result<PretextSample> {
    let set = match &level.payload {
        LevelPayload::Rotation(set) => set,
        _ => return Err(Error::invalid("rotation sample requested from a non-rotation level")),
    };
    let index = rng.gen_range(0..set.len());
    rotation_sample_with_angle(image, level, set.angles()[index], meta)
}
