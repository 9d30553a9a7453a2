//! Datasets: a seeded synthetic 16x16 digit generator and an IDX reader.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::network::TrainingBatch;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: [usize; 3],
    pub num_classes: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dims: [usize; 3], num_classes: usize, images: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if images.len() != labels.len() * n {
            return Err(Error::Dataset(format!("{} pixels for {} labels of {:?}", images.len(), labels.len(), dims)));
        }
        if let Some(i) = labels.iter().position(|&l| l >= num_classes) {
            return Err(Error::Dataset(format!("label {} at index {i} exceeds {num_classes} classes", labels[i])));
        }
        Ok(Dataset { dims, num_classes, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<TrainingBatch> {
        let mut inputs = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
        }
        TrainingBatch::new(self.dims, inputs, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn all(&self) -> Result<TrainingBatch> {
        TrainingBatch::new(self.dims, self.images.clone(), self.labels.clone())
    }

    /// First `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            dims: self.dims,
            num_classes: self.num_classes,
            images: self.images[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn split(self, first: usize) -> (Dataset, Dataset) {
        let first = first.min(self.len());
        let cut = first * self.sample_len();
        let a = Dataset {
            dims: self.dims,
            num_classes: self.num_classes,
            images: self.images[..cut].to_vec(),
            labels: self.labels[..first].to_vec(),
        };
        let b = Dataset {
            dims: self.dims,
            num_classes: self.num_classes,
            images: self.images[cut..].to_vec(),
            labels: self.labels[first..].to_vec(),
        };
        (a, b)
    }
}

/// 5x7 bitmaps of the digits 0-9, one row per byte, bit 4 = leftmost column.
const GLYPHS: [[u8; 7]; 10] = [
    [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e],
    [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e],
    [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f],
    [0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e],
    [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02],
    [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e],
    [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e],
    [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
    [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c],
];

fn glyph_pixel(digit: usize, col: i64, row: i64) -> f64 {
    if !(0..5).contains(&col) || !(0..7).contains(&row) {
        return 0.0;
    }
    if GLYPHS[digit][row as usize] & (0x10 >> col) != 0 {
        1.0
    } else {
        0.0
    }
}

/// Bilinear sample of the glyph bitmap at continuous coordinates.
fn glyph_sample(digit: usize, u: f64, v: f64) -> f64 {
    let (u0, v0) = ((u - 0.5).floor(), (v - 0.5).floor());
    let (fu, fv) = (u - 0.5 - u0, v - 0.5 - v0);
    let (c, r) = (u0 as i64, v0 as i64);
    glyph_pixel(digit, c, r) * (1.0 - fu) * (1.0 - fv)
        + glyph_pixel(digit, c + 1, r) * fu * (1.0 - fv)
        + glyph_pixel(digit, c, r + 1) * (1.0 - fu) * fv
        + glyph_pixel(digit, c + 1, r + 1) * fu * fv
}

pub const SYNTHETIC_SIDE: usize = 16;

/// `n` 16x16 grayscale digits in [0, 1] with random scale, shear, position,
/// stroke intensity and additive Gaussian noise. Labels cycle through 0-9
/// before shuffling by the generator, so classes stay balanced.
pub fn synthetic_digits(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.12).expect("valid sigma");
    let side = SYNTHETIC_SIDE;
    let mut images = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        let sx: f64 = rng.random_range(1.5..2.2);
        let sy: f64 = rng.random_range(1.5..2.0);
        let shear: f64 = rng.random_range(-0.25..0.25);
        let (gw, gh) = (5.0 * sx, 7.0 * sy);
        let ox: f64 = rng.random_range(0.0..(side as f64 - gw).max(0.5));
        let oy: f64 = rng.random_range(0.0..(side as f64 - gh).max(0.5));
        let ink: f64 = rng.random_range(0.6..1.0);
        for y in 0..side {
            for x in 0..side {
                let v = (y as f64 + 0.5 - oy) / sy;
                let u = (x as f64 + 0.5 - ox) / sx - shear * (v - 3.5);
                let p = ink * glyph_sample(digit, u, v) + noise.sample(&mut rng);
                images.push(p.clamp(0.0, 1.0));
            }
        }
        labels.push(digit);
    }
    // Fisher-Yates over sample indices
    let sample = side * side;
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        if i != j {
            labels.swap(i, j);
            for k in 0..sample {
                images.swap(i * sample + k, j * sample + k);
            }
        }
    }
    Dataset { dims: [1, side, side], num_classes: 10, images, labels }
}

fn read_u32_be(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_be_bytes(b))
}

/// Reads an uncompressed IDX image/label pair (e.g. MNIST). Pixels are scaled
/// to [0, 1]; labels must be below `num_classes`.
pub fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let mut f = std::io::BufReader::new(std::fs::File::open(images).map_err(|e| Error::io(images, e))?);
    let magic = read_u32_be(&mut f, images)?;
    if magic != 0x0803 {
        return Err(Error::Dataset(format!("{}: bad image magic {magic:#x}", images.display())));
    }
    let n = read_u32_be(&mut f, images)? as usize;
    let rows = read_u32_be(&mut f, images)? as usize;
    let cols = read_u32_be(&mut f, images)? as usize;
    let mut pixels = vec![0u8; n * rows * cols];
    f.read_exact(&mut pixels).map_err(|e| Error::io(images, e))?;

    let mut g = std::io::BufReader::new(std::fs::File::open(labels).map_err(|e| Error::io(labels, e))?);
    let magic = read_u32_be(&mut g, labels)?;
    if magic != 0x0801 {
        return Err(Error::Dataset(format!("{}: bad label magic {magic:#x}", labels.display())));
    }
    let m = read_u32_be(&mut g, labels)? as usize;
    if m != n {
        return Err(Error::Dataset(format!("{n} images but {m} labels")));
    }
    let mut raw = vec![0u8; m];
    g.read_exact(&mut raw).map_err(|e| Error::io(labels, e))?;
    Dataset::new(
        [1, rows, cols],
        num_classes,
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        raw.iter().map(|&l| l as usize).collect(),
    )
}
