//! Augmentation primitives and the nested contrastive pipelines.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::rng::Rng;

/// One parameterized augmentation. Each op fires with probability `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AugmentOp {
    /// Random-area, random-aspect crop resized to the pipeline resolution.
    CropResize { p: f32, scale: (f32, f32), ratio: (f32, f32) },
    HorizontalFlip { p: f32 },
    /// Brightness/contrast/saturation jitter of `0.8 * strength` and hue
    /// jitter of `0.2 * strength`, followed by grayscale with `grayscale_p`.
    ColorDistortion { p: f32, strength: f32, grayscale_p: f32 },
    /// Separable blur; kernel side is `kernel_frac` of the shorter image side,
    /// rounded to an odd number (at least 3).
    GaussianBlur { p: f32, sigma: (f32, f32), kernel_frac: f32 },
    /// Per-channel gradient magnitude, renormalized to `[0, 1]`.
    Sobel { p: f32 },
}

impl AugmentOp {
    pub fn kind(&self) -> &'static str {
        match self {
            AugmentOp::CropResize { .. } => "crop-resize",
            AugmentOp::HorizontalFlip { .. } => "horizontal-flip",
            AugmentOp::ColorDistortion { .. } => "color-distortion",
            AugmentOp::GaussianBlur { .. } => "gaussian-blur",
            AugmentOp::Sobel { .. } => "sobel",
        }
    }

    pub fn probability(&self) -> f32 {
        match *self {
            AugmentOp::CropResize { p, .. }
            | AugmentOp::HorizontalFlip { p }
            | AugmentOp::ColorDistortion { p, .. }
            | AugmentOp::GaussianBlur { p, .. }
            | AugmentOp::Sobel { p } => p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.probability();
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("{}: probability {p} outside [0, 1]", self.kind())));
        }
        match *self {
            AugmentOp::CropResize { scale, ratio, .. } => {
                if !(scale.0 > 0.0 && scale.0 <= scale.1 && scale.1 <= 1.0) {
                    return Err(Error::invalid(format!("degenerate crop scale range {scale:?}")));
                }
                if !(ratio.0 > 0.0 && ratio.0 <= ratio.1) {
                    return Err(Error::invalid(format!("degenerate crop ratio range {ratio:?}")));
                }
            }
            AugmentOp::ColorDistortion { strength, grayscale_p, .. } => {
                if !(strength >= 0.0 && (0.0..=1.0).contains(&grayscale_p)) {
                    return Err(Error::invalid("color distortion strength/grayscale probability out of range"));
                }
            }
            AugmentOp::GaussianBlur { sigma, kernel_frac, .. } => {
                if !(sigma.0 > 0.0 && sigma.0 <= sigma.1) {
                    return Err(Error::invalid(format!("blur sigma range {sigma:?} must be positive and ordered")));
                }
                if !(kernel_frac > 0.0 && kernel_frac <= 1.0) {
                    return Err(Error::invalid(format!("blur kernel fraction {kernel_frac} outside (0, 1]")));
                }
            }
            AugmentOp::HorizontalFlip { .. } | AugmentOp::Sobel { .. } => {}
        }
        Ok(())
    }
}

/// Ordered op list for one contrastive level, producing `size`x`size` views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPipeline {
    pub level: u8,
    pub size: usize,
    pub ops: Vec<AugmentOp>,
}

/// Knobs for the default contrastive levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveParams {
    pub size: usize,
    pub crop_scale: (f32, f32),
    pub color_strength: f32,
    pub color_p: f32,
    pub grayscale_p: f32,
    pub blur_p: f32,
    pub blur_sigma: (f32, f32),
    pub sobel_p: f32,
}

impl Default for ContrastiveParams {
    fn default() -> Self {
        ContrastiveParams {
            size: 224,
            crop_scale: (0.08, 1.0),
            color_strength: 1.0,
            color_p: 0.8,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
            sobel_p: 0.1,
        }
    }
}

impl AugmentationPipeline {
    /// Level 1 crops; level 2 adds color distortion; level 3 adds blur and
    /// Sobel filtering.
    pub fn standard(level: u8, params: &ContrastiveParams) -> Result<Self> {
        if !(1..=3).contains(&level) {
            return Err(Error::invalid(format!("contrastive level {level} outside 1..=3")));
        }
        let mut ops = vec![AugmentOp::CropResize {
            p: 1.0,
            scale: params.crop_scale,
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        }];
        if level >= 2 {
            ops.push(AugmentOp::ColorDistortion {
                p: params.color_p,
                strength: params.color_strength,
                grayscale_p: params.grayscale_p,
            });
        }
        if level >= 3 {
            ops.push(AugmentOp::GaussianBlur {
                p: params.blur_p,
                sigma: params.blur_sigma,
                kernel_frac: 0.1,
            });
            ops.push(AugmentOp::Sobel { p: params.sobel_p });
        }
        let pipeline = AugmentationPipeline {
            level,
            size: params.size,
            ops,
        };
        pipeline.validate()?;
        Ok(pipeline)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ops.is_empty() {
            return Err(Error::invalid("augmentation pipeline has no ops"));
        }
        if self.size == 0 {
            return Err(Error::invalid("augmentation output size must be positive"));
        }
        self.ops.iter().try_for_each(AugmentOp::validate)
    }

    /// True when every op of `other` also appears here.
    pub fn is_superset_of(&self, other: &AugmentationPipeline) -> bool {
        other.ops.iter().all(|op| self.ops.contains(op))
    }

    /// One independent draw of the pipeline.
    pub fn apply(&self, image: &Image, rng: &mut Rng) -> Result<Image> {
        self.validate()?;
        let mut current = image.clone();
        let mut resized = false;
        for op in &self.ops {
            current = match op {
                AugmentOp::CropResize { .. } => {
                    resized = true;
                    random_resized_crop(op, &current, self.size, rng)?
                }
                _ => apply_augmentation(op, &current, rng)?,
            };
        }
        if !resized || current.height() != self.size || current.width() != self.size {
            current = current.resize_bilinear(self.size, self.size)?;
        }
        Ok(current)
    }
}

/// Two independent draws of `pipeline` over the same source image.
pub fn make_contrastive_pair(image: &Image, pipeline: &AugmentationPipeline, rng: &mut Rng) -> Result<(Image, Image)> {
    let a = pipeline.apply(image, rng)?;
    let b = pipeline.apply(image, rng)?;
    Ok((a, b))
}

fn fires(p: f32, rng: &mut Rng) -> bool {
    let u: f32 = rng.gen();
    u < p
}

/// Crop region `(top, left, height, width)` following the usual
/// random-resized-crop recipe, falling back to the largest centered crop.
fn crop_region(image: &Image, scale: (f32, f32), ratio: (f32, f32), rng: &mut Rng) -> (usize, usize, usize, usize) {
    let (h, w) = (image.height(), image.width());
    let area = (h * w) as f32;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.gen_range(scale.0..=scale.1);
        let aspect = if lr0 < lr1 { rng.gen_range(lr0..=lr1) } else { lr0 }.exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let in_ratio = w as f32 / h as f32;
    let (ch, cw) = if in_ratio < ratio.0 {
        (((w as f32) / ratio.0).round() as usize, w)
    } else if in_ratio > ratio.1 {
        (h, ((h as f32) * ratio.1).round() as usize)
    } else {
        (h, w)
    };
    let (ch, cw) = (ch.clamp(1, h), cw.clamp(1, w));
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

fn random_resized_crop(op: &AugmentOp, image: &Image, size: usize, rng: &mut Rng) -> Result<Image> {
    let AugmentOp::CropResize { p, scale, ratio } = *op else {
        unreachable!("called with a crop op")
    };
    if !fires(p, rng) {
        return image.resize_bilinear(size, size);
    }
    let (top, left, ch, cw) = crop_region(image, scale, ratio, rng);
    image.crop(top, left, ch, cw)?.resize_bilinear(size, size)
}

/// Applies one op. Crops here keep the cropped resolution; pipelines resize.
pub fn apply_augmentation(op: &AugmentOp, image: &Image, rng: &mut Rng) -> Result<Image> {
    op.validate()?;
    if !fires(op.probability(), rng) {
        return Ok(image.clone());
    }
    match *op {
        AugmentOp::CropResize { scale, ratio, .. } => {
            let (top, left, ch, cw) = crop_region(image, scale, ratio, rng);
            image.crop(top, left, ch, cw)
        }
        AugmentOp::HorizontalFlip { .. } => Ok(image.hflip()),
        AugmentOp::ColorDistortion {
            strength, grayscale_p, ..
        } => Ok(color_distort(image, strength, grayscale_p, rng)),
        AugmentOp::GaussianBlur { sigma, kernel_frac, .. } => {
            let s = if sigma.0 < sigma.1 {
                rng.gen_range(sigma.0..=sigma.1)
            } else {
                sigma.0
            };
            let side = image.height().min(image.width()) as f32 * kernel_frac;
            let mut k = (side.round() as usize).max(3);
            if k.is_multiple_of(2) {
                k += 1;
            }
            gaussian_blur(image, s, k)
        }
        AugmentOp::Sobel { .. } => Ok(sobel(image)),
    }
}

fn color_distort(image: &Image, strength: f32, grayscale_p: f32, rng: &mut Rng) -> Image {
    let jitter = 0.8 * strength;
    let mut order = [0u8, 1, 2, 3];
    order.shuffle(rng);
    let mut out = image.clone();
    for step in order {
        match step {
            0 => {
                let f = rng.gen_range((1.0 - jitter).max(0.0)..=1.0 + jitter);
                out.data_mut().iter_mut().for_each(|v| *v *= f);
            }
            1 => {
                let f = rng.gen_range((1.0 - jitter).max(0.0)..=1.0 + jitter);
                let m = out.grayscale().mean();
                out.data_mut().iter_mut().for_each(|v| *v = (*v - m) * f + m);
            }
            2 => {
                let f = rng.gen_range((1.0 - jitter).max(0.0)..=1.0 + jitter);
                let g = out.grayscale();
                out.data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(v, &gv)| *v = gv + (*v - gv) * f);
            }
            _ => {
                let h = 0.2 * strength.min(2.5);
                let shift = if h > 0.0 { rng.gen_range(-h..=h) } else { 0.0 };
                shift_hue(&mut out, shift);
            }
        }
        out.clamp01();
    }
    if fires(grayscale_p, rng) {
        out = out.grayscale();
    }
    out
}

fn shift_hue(image: &mut Image, shift: f32) {
    if image.channels() != 3 || shift == 0.0 {
        return;
    }
    let n = image.height() * image.width();
    let data = image.data_mut();
    for i in 0..n {
        let (r, g, b) = (data[i], data[n + i], data[2 * n + i]);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let delta = max - min;
        if delta <= 0.0 {
            continue;
        }
        let mut h = if max == r {
            ((g - b) / delta).rem_euclid(6.0)
        } else if max == g {
            (b - r) / delta + 2.0
        } else {
            (r - g) / delta + 4.0
        } / 6.0;
        h = (h + shift).rem_euclid(1.0);
        let s = delta / max;
        let v = max;
        let hh = h * 6.0;
        let sector = (hh.floor() as i32).rem_euclid(6);
        let f = hh - hh.floor();
        let p = v * (1.0 - s);
        let q = v * (1.0 - s * f);
        let t = v * (1.0 - s * (1.0 - f));
        let (nr, ng, nb) = match sector {
            0 => (v, t, p),
            1 => (q, v, p),
            2 => (p, v, t),
            3 => (p, q, v),
            4 => (t, p, v),
            _ => (v, p, q),
        };
        data[i] = nr;
        data[n + i] = ng;
        data[2 * n + i] = nb;
    }
}

/// Separable Gaussian blur with an odd `kernel` side and edge clamping.
pub fn gaussian_blur(image: &Image, sigma: f32, kernel: usize) -> Result<Image> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("blur sigma {sigma} must be positive")));
    }
    if kernel.is_multiple_of(2) {
        return Err(Error::invalid(format!("blur kernel {kernel} must be odd")));
    }
    let r = (kernel / 2) as isize;
    let mut weights: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * f64::from(sigma).powi(2))).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);

    let (h, w) = (image.height() as isize, image.width() as isize);
    let mut tmp = image.clone();
    let mut out = image.clone();
    for c in 0..image.channels() {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (k, wt) in weights.iter().enumerate() {
                    let xx = (x + k as isize - r).clamp(0, w - 1);
                    acc += wt * f64::from(image.at(c, y as usize, xx as usize));
                }
                tmp.set(c, y as usize, x as usize, acc as f32);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (k, wt) in weights.iter().enumerate() {
                    let yy = (y + k as isize - r).clamp(0, h - 1);
                    acc += wt * f64::from(tmp.at(c, yy as usize, x as usize));
                }
                out.set(c, y as usize, x as usize, acc as f32);
            }
        }
    }
    Ok(out)
}

/// Per-channel Sobel gradient magnitude with edge clamping, divided by its
/// channel maximum.
pub fn sobel(image: &Image) -> Image {
    let (h, w) = (image.height() as isize, image.width() as isize);
    let mut out = Image::zeros(image.channels(), image.height(), image.width());
    for c in 0..image.channels() {
        let px = |y: isize, x: isize| image.at(c, y.clamp(0, h - 1) as usize, x.clamp(0, w - 1) as usize);
        let mut max = 0.0f32;
        for y in 0..h {
            for x in 0..w {
                let gx = (px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1))
                    - (px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1));
                let gy = (px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1))
                    - (px(y - 1, x - 1) + 2.0 * px(y - 1, x) + px(y - 1, x + 1));
                let m = (gx * gx + gy * gy).sqrt();
                max = max.max(m);
                out.set(c, y as usize, x as usize, m);
            }
        }
        if max > 0.0 {
            out.plane_mut(c).iter_mut().for_each(|v| *v /= max);
        }
    }
    out
}
