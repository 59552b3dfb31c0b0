//! Planar `[C, H, W]` float images and the geometric primitives the pretext
//! tasks are built from.

use crate::error::{Error, Result};

/// A planar image, channel-major, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "image buffer of {} values cannot hold [{channels}, {height}, {width}]",
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds an image from planar bytes, scaling to `[0, 1]`.
    pub fn from_planar_u8(channels: usize, height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
        Self::from_vec(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::invalid(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{} image",
                self.height, self.width
            )));
        }
        let mut out = Image::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                let src = (c * self.height + top + y) * self.width + left;
                let dst = (c * height + y) * width;
                out.data[dst..dst + width].copy_from_slice(&self.data[src..src + width]);
            }
        }
        Ok(out)
    }

    pub fn center_crop(&self, height: usize, width: usize) -> Result<Image> {
        if height > self.height || width > self.width {
            return Err(Error::invalid(format!(
                "center crop {height}x{width} larger than {}x{} image",
                self.height, self.width
            )));
        }
        self.crop((self.height - height) / 2, (self.width - width) / 2, height, width)
    }

    pub fn hflip(&self) -> Image {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                let row = (c * self.height + y) * self.width;
                out.data[row..row + self.width].reverse();
            }
        }
        out
    }

    /// Rotates counter-clockwise by `quarter_turns * 90` degrees with an exact
    /// pixel remap.
    pub fn rotate90(&self, quarter_turns: usize) -> Image {
        let (h, w) = (self.height, self.width);
        match quarter_turns % 4 {
            0 => self.clone(),
            2 => {
                let mut out = self.clone();
                for c in 0..self.channels {
                    out.plane_mut(c).reverse();
                }
                out
            }
            k => {
                let mut out = Image::zeros(self.channels, w, h);
                for c in 0..self.channels {
                    for y in 0..w {
                        for x in 0..h {
                            // CCW: out[y][x] = in[x][w-1-y]; CW: out[y][x] = in[h-1-x][y]
                            let v = if k == 1 {
                                self.at(c, x, w - 1 - y)
                            } else {
                                self.at(c, h - 1 - x, y)
                            };
                            out.set(c, y, x, v);
                        }
                    }
                }
                out
            }
        }
    }

    /// Bilinear sample at continuous pixel-center coordinates, clamping to the
    /// border so no fill value is ever introduced.
    #[inline]
    pub fn sample_bilinear(&self, c: usize, y: f32, x: f32) -> f32 {
        let maxy = (self.height - 1) as f32;
        let maxx = (self.width - 1) as f32;
        let y = y.clamp(0.0, maxy);
        let x = x.clamp(0.0, maxx);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = y - y0 as f32;
        let fx = x - x0 as f32;
        let top = self.at(c, y0, x0) + (self.at(c, y0, x1) - self.at(c, y0, x0)) * fx;
        let bottom = self.at(c, y1, x0) + (self.at(c, y1, x1) - self.at(c, y1, x0)) * fx;
        top + (bottom - top) * fy
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("resize to an empty image"));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let mut out = Image::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                let fy = (y as f32 + 0.5) * sy - 0.5;
                for x in 0..width {
                    let fx = (x as f32 + 0.5) * sx - 0.5;
                    out.set(c, y, x, self.sample_bilinear(c, fy, fx));
                }
            }
        }
        Ok(out)
    }

    /// Resizes so the shorter side equals `side`, keeping the aspect ratio.
    pub fn resize_shorter_side(&self, side: usize) -> Result<Image> {
        let (h, w) = (self.height, self.width);
        let (nh, nw) = if h <= w {
            (side, ((w * side) as f64 / h as f64).round() as usize)
        } else {
            (((h * side) as f64 / w as f64).round() as usize, side)
        };
        self.resize_bilinear(nh, nw.max(1))
    }

    /// Rotates counter-clockwise by `degrees` about the image center with
    /// bilinear interpolation. Output keeps the input size; samples falling
    /// outside the source are clamped to the border.
    pub fn rotate_bilinear(&self, degrees: f32) -> Image {
        let theta = degrees.to_radians();
        let (sin, cos) = theta.sin_cos();
        let cy = (self.height as f32 - 1.0) / 2.0;
        let cx = (self.width as f32 - 1.0) / 2.0;
        let mut out = Image::zeros(self.channels, self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                // image y axis points down, so a CCW turn on screen maps the
                // output offset back through the inverse rotation like this
                let dy = y as f32 - cy;
                let dx = x as f32 - cx;
                let sx = cos * dx - sin * dy + cx;
                let sy = sin * dx + cos * dy + cy;
                for c in 0..self.channels {
                    out.set(c, y, x, self.sample_bilinear(c, sy, sx));
                }
            }
        }
        out
    }

    /// Converts to single-channel luminance replicated across channels.
    pub fn grayscale(&self) -> Image {
        if self.channels != 3 {
            return self.clone();
        }
        let n = self.height * self.width;
        let mut out = self.clone();
        for i in 0..n {
            let g = 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i];
            out.data[i] = g;
            out.data[n + i] = g;
            out.data[2 * n + i] = g;
        }
        out
    }

    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64) as f32
    }
}

/// Side of the largest axis-aligned square that fits inside a `side`-wide
/// square rotated by `degrees`.
pub fn inscribed_square_side(side: usize, degrees: f32) -> usize {
    let t = degrees.to_radians();
    let s = side as f32 / (t.cos().abs() + t.sin().abs());
    (s.floor() as usize).clamp(1, side)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Image {
        let data = (0..c * h * w).map(|i| i as f32).collect();
        Image::from_vec(c, h, w, data).unwrap()
    }

    #[test]
    fn rotate90_group_properties() {
        let img = ramp(2, 5, 5);
        assert_eq!(img.rotate90(1).rotate90(1), img.rotate90(2));
        assert_eq!(img.rotate90(1).rotate90(3), img);
        assert_eq!(img.rotate90(4), img);
        let rect = ramp(1, 2, 3);
        let r = rect.rotate90(1);
        assert_eq!(r.shape(), [1, 3, 2]);
        // top-right corner moves to top-left under a CCW quarter turn
        assert_eq!(r.at(0, 0, 0), rect.at(0, 0, 2));
        assert_eq!(rect.rotate90(1).rotate90(1).rotate90(1).rotate90(1), rect);
    }

    #[test]
    fn bilinear_rotation_matches_exact_quarter_turn_on_pixel_grid() {
        let img = ramp(1, 6, 6);
        let exact = img.rotate90(1);
        let interp = img.rotate_bilinear(90.0);
        for (a, b) in exact.data().iter().zip(interp.data()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn inscribed_square() {
        assert_eq!(inscribed_square_side(32, 0.0), 32);
        assert_eq!(inscribed_square_side(32, 45.0), 22);
        assert_eq!(inscribed_square_side(100, 135.0), 70);
    }

    #[test]
    fn crop_bounds_are_checked() {
        let img = ramp(1, 4, 4);
        assert!(img.crop(1, 1, 3, 3).is_ok());
        assert!(img.crop(2, 0, 3, 1).is_err());
        assert!(img.crop(0, 0, 0, 1).is_err());
        assert_eq!(img.crop(1, 2, 1, 1).unwrap().at(0, 0, 0), 6.0);
    }

    #[test]
    fn resize_identity_and_shorter_side() {
        let img = ramp(3, 4, 6);
        assert_eq!(img.resize_bilinear(4, 6).unwrap(), img);
        let r = img.resize_shorter_side(8).unwrap();
        assert_eq!((r.height(), r.width()), (8, 12));
    }
}
