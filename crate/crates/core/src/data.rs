//! In-memory labelled image collections and the on-disk formats they load from.

use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::rng;

/// Images stored as planar bytes with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    id: String,
    channels: usize,
    side: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        id: impl Into<String>,
        channels: usize,
        side: usize,
        pixels: Vec<u8>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let per = channels * side * side;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::shape(format!(
                "{} pixel bytes for {} images of [{channels}, {side}, {side}]",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::invalid(format!("label {bad} outside {} classes", class_names.len())));
        }
        Ok(Dataset {
            id: id.into(),
            channels,
            side,
            pixels,
            labels,
            class_names,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    pub fn image(&self, index: usize) -> Image {
        let per = self.channels * self.side * self.side;
        Image::from_planar_u8(self.channels, self.side, self.side, &self.pixels[index * per..(index + 1) * per])
            .expect("sizes checked at construction")
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let per = self.channels * self.side * self.side;
        let mut pixels = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("subset index {i} outside dataset of {}", self.len())));
            }
            pixels.extend_from_slice(&self.pixels[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Dataset::new(self.id.clone(), self.channels, self.side, pixels, labels, self.class_names.clone())
    }

    /// First `n` images (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx).expect("indices in range")
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Decodes one CIFAR-10 binary batch: a label byte followed by 3072 planar
/// RGB bytes per record.
pub fn parse_cifar10_batch(bytes: &[u8]) -> Result<(Vec<u8>, Vec<usize>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(
            "cifar-10 batch",
            format!("{} bytes is not a multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::format("cifar-10 batch", format!("record {i} has label {}", rec[0])));
        }
        labels.push(usize::from(rec[0]));
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Locates the directory holding `data_batch_1.bin`, either `root` itself or
/// the `cifar-10-batches-bin` folder produced by extracting the archive.
fn cifar_dir(root: &Path) -> Result<PathBuf> {
    for dir in [root.to_path_buf(), root.join("cifar-10-batches-bin")] {
        if dir.join("data_batch_1.bin").is_file() {
            return Ok(dir);
        }
    }
    Err(Error::io(
        root.join("data_batch_1.bin"),
        std::io::Error::new(std::io::ErrorKind::NotFound, "CIFAR-10 binary batches not found"),
    ))
}

/// Loads the 50 000-image training split and the 10 000-image test split.
pub fn load_cifar10(root: &Path) -> Result<(Dataset, Dataset)> {
    let dir = cifar_dir(root)?;
    let classes: Vec<String> = CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for b in 1..=5 {
        let (p, l) = parse_cifar10_batch(&read(&dir.join(format!("data_batch_{b}.bin")))?)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let train = Dataset::new("cifar10/train", 3, 32, pixels, labels, classes.clone())?;
    let (p, l) = parse_cifar10_batch(&read(&dir.join("test_batch.bin"))?)?;
    let test = Dataset::new("cifar10/test", 3, 32, p, l, classes)?;
    Ok((train, test))
}

const STL_SIDE: usize = 96;

/// Decodes STL-10 image bytes (column-major per channel) and optional
/// 1-based label bytes.
pub fn parse_stl10(x: &[u8], y: Option<&[u8]>) -> Result<(Vec<u8>, Vec<usize>)> {
    let per = 3 * STL_SIDE * STL_SIDE;
    if x.is_empty() || !x.len().is_multiple_of(per) {
        return Err(Error::format("stl-10 images", format!("{} bytes is not a multiple of {per}", x.len())));
    }
    let n = x.len() / per;
    let labels = match y {
        Some(y) => {
            if y.len() != n {
                return Err(Error::format("stl-10 labels", format!("{} labels for {n} images", y.len())));
            }
            y.iter()
                .enumerate()
                .map(|(i, &l)| {
                    if (1..=10).contains(&l) {
                        Ok(usize::from(l - 1))
                    } else {
                        Err(Error::format("stl-10 labels", format!("label {l} at {i}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => vec![0; n],
    };
    let mut pixels = vec![0u8; x.len()];
    let plane = STL_SIDE * STL_SIDE;
    for (src, dst) in x.chunks_exact(per).zip(pixels.chunks_exact_mut(per)) {
        for c in 0..3 {
            for col in 0..STL_SIDE {
                for row in 0..STL_SIDE {
                    dst[c * plane + row * STL_SIDE + col] = src[c * plane + col * STL_SIDE + row];
                }
            }
        }
    }
    Ok((pixels, labels))
}

pub const STL10_CLASSES: [&str; 10] = [
    "airplane", "bird", "car", "cat", "deer", "dog", "horse", "monkey", "ship", "truck",
];

pub fn load_stl10(root: &Path) -> Result<(Dataset, Dataset)> {
    let dir = if root.join("train_X.bin").is_file() {
        root.to_path_buf()
    } else {
        root.join("stl10_binary")
    };
    let classes: Vec<String> = STL10_CLASSES.iter().map(|s| s.to_string()).collect();
    let load = |split: &str| -> Result<Dataset> {
        let x = read(&dir.join(format!("{split}_X.bin")))?;
        let y = read(&dir.join(format!("{split}_y.bin")))?;
        let (p, l) = parse_stl10(&x, Some(&y))?;
        Dataset::new(format!("stl10/{split}"), 3, STL_SIDE, p, l, classes.clone())
    };
    Ok((load("train")?, load("test")?))
}

/// One sub-directory per class, images of any common format inside; every
/// image is resized to `side`×`side` RGB.
pub fn load_image_folder(root: &Path, side: usize) -> Result<Dataset> {
    let mut classes: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::invalid(format!("{} has no class directories", root.display())));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut names = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        names.push(dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            let Ok(img) = image::open(&f) else { continue };
            let rgb = img
                .resize_exact(side as u32, side as u32, image::imageops::FilterType::Triangle)
                .to_rgb8();
            let plane = side * side;
            let mut planar = vec![0u8; 3 * plane];
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    planar[c * plane + i] = px.0[c];
                }
            }
            pixels.extend(planar);
            labels.push(label);
        }
    }
    let id = format!("folder/{}", root.file_name().map(|n| n.to_string_lossy()).unwrap_or_default());
    Dataset::new(id, 3, side, pixels, labels, names)
}

pub const SHAPE_CLASSES: [&str; 6] = ["disk", "square", "triangle", "plus", "ring", "tee"];

/// Procedural dataset of upright shapes on a vertically graded background.
/// Shapes keep a canonical orientation so rotation is recognisable.
pub fn synthetic_shapes(id: &str, n: usize, side: usize, seed: u64) -> Dataset {
    let per = 3 * side * side;
    let mut pixels = vec![0u8; n * per];
    let mut labels = Vec::with_capacity(n);
    let s = side as f32;
    for i in 0..n {
        let mut r = rng::child_rng(seed, &[0x5a, i as u64]);
        let class = r.gen_range(0..SHAPE_CLASSES.len());
        labels.push(class);
        let sky: [f32; 3] = [r.gen_range(0.5..0.9), r.gen_range(0.6..0.95), r.gen_range(0.7..1.0)];
        let ground: [f32; 3] = [r.gen_range(0.1..0.4), r.gen_range(0.2..0.45), r.gen_range(0.05..0.3)];
        let fg: [f32; 3] = [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)];
        let radius = r.gen_range(0.18..0.3) * s;
        let cx = r.gen_range(radius..s - radius);
        let cy = r.gen_range(radius..s - radius);
        let img = &mut pixels[i * per..(i + 1) * per];
        for y in 0..side {
            for x in 0..side {
                let (dx, dy) = ((x as f32 + 0.5 - cx) / radius, (y as f32 + 0.5 - cy) / radius);
                let inside = match class {
                    0 => dx * dx + dy * dy <= 1.0,
                    1 => dx.abs() <= 0.8 && dy.abs() <= 0.8,
                    2 => (-1.0..=0.8).contains(&dy) && dx.abs() <= (dy + 1.0) * 0.55,
                    3 => (dx.abs() <= 0.3 && dy.abs() <= 1.0) || (dy.abs() <= 0.3 && dx.abs() <= 1.0),
                    4 => {
                        let d = dx * dx + dy * dy;
                        (0.4..=1.0).contains(&d)
                    }
                    _ => ((-1.0..=-0.55).contains(&dy) && dx.abs() <= 1.0) || (dx.abs() <= 0.25 && dy.abs() <= 1.0),
                };
                let t = y as f32 / (s - 1.0).max(1.0);
                let noise: f32 = r.gen_range(-0.04..0.04);
                for c in 0..3 {
                    let bg = sky[c] * (1.0 - t) + ground[c] * t;
                    let v = if inside { fg[c] } else { bg } + noise;
                    img[c * side * side + y * side + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    let names = SHAPE_CLASSES.iter().map(|s| s.to_string()).collect();
    Dataset::new(id, 3, side, pixels, labels, names).expect("generated consistently")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_records_round_trip() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 3;
        bytes[1] = 255;
        bytes[CIFAR_RECORD] = 9;
        let (pixels, labels) = parse_cifar10_batch(&bytes).unwrap();
        assert_eq!(labels, vec![3, 9]);
        assert_eq!(pixels.len(), 2 * 3072);
        assert_eq!(pixels[0], 255);
        bytes[0] = 10;
        assert!(parse_cifar10_batch(&bytes).is_err());
        assert!(parse_cifar10_batch(&bytes[..100]).is_err());
    }

    #[test]
    fn stl_transposes_column_major_planes() {
        let per = 3 * 96 * 96;
        let mut x = vec![0u8; per];
        // column 0, row 1 of the red plane
        x[1] = 200;
        let (p, l) = parse_stl10(&x, Some(&[4])).unwrap();
        assert_eq!(l, vec![3]);
        assert_eq!(p[96], 200);
        assert!(parse_stl10(&x, Some(&[0])).is_err());
        assert!(parse_stl10(&x, Some(&[1, 2])).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_covers_classes() {
        let a = synthetic_shapes("s", 120, 32, 4);
        let b = synthetic_shapes("s", 120, 32, 4);
        assert_eq!(a, b);
        assert!(a.class_counts().iter().all(|&c| c > 5));
        let img = a.image(0);
        assert_eq!(img.shape(), [3, 32, 32]);
    }

    #[test]
    fn subset_and_validation() {
        let d = synthetic_shapes("s", 10, 8, 0);
        let s = d.subset(&[3, 1]).unwrap();
        assert_eq!(s.labels(), &[d.label(3), d.label(1)]);
        assert_eq!(s.image(0), d.image(3));
        assert!(d.subset(&[10]).is_err());
        assert!(Dataset::new("x", 3, 2, vec![0; 12], vec![1], vec!["a".into()]).is_err());
    }
}
