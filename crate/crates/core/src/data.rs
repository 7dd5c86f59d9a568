//! Datasets: IDX ubyte files and a seeded synthetic generator.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// One mini-batch: images `[N, C, H, W]` scaled to `[0, 1]` plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// 8-bit images with labels. Pixels are kept as bytes and scaled by 1/255
/// whenever a batch is materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<usize>,
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    pub splits: Splits,
}

impl Dataset {
    pub fn new(
        pixels: Vec<u8>,
        labels: Vec<usize>,
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if pixels.len() != n * channels * height * width {
            return Err(Error::CountMismatch { images: pixels.len() / (channels * height * width).max(1), labels: n });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|&(_, &l)| l >= num_classes) {
            return Err(Error::LabelRange { index, label, classes: num_classes });
        }
        let splits = Splits { train: (0..n).collect(), ..Splits::default() };
        Ok(Self { pixels, labels, channels, height, width, num_classes, splits })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(N, H, W, channels)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.len(), self.height, self.width, self.channels)
    }

    /// Per-sample network input shape `[C, H, W]`.
    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.channels, self.height, self.width]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let m = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            data.extend(self.pixels[i * m..(i + 1) * m].iter().map(|&p| f64::from(p) / 255.0));
        }
        let images = Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data).expect("sized");
        Batch { images, labels: indices.iter().map(|&i| self.labels[i]).collect() }
    }

    /// Keeps the first `limit` samples.
    pub fn truncate(&mut self, limit: usize) {
        if limit < self.len() {
            self.pixels.truncate(limit * self.sample_len());
            self.labels.truncate(limit);
            self.splits = Splits { train: (0..limit).collect(), ..Splits::default() };
        }
    }

    /// Seeded shuffle into disjoint train/validation/test index lists.
    pub fn split(&mut self, val_frac: f64, test_frac: f64, seed: u64) -> Result<()> {
        if !(0.0..1.0).contains(&(val_frac + test_frac)) || val_frac < 0.0 || test_frac < 0.0 {
            return Err(Error::Config(format!("bad split fractions {val_frac}, {test_frac}")));
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (n as f64 * val_frac).round() as usize;
        let n_test = (n as f64 * test_frac).round() as usize;
        if n_val + n_test >= n {
            return Err(Error::Config(format!("{n} samples leave nothing to train on")));
        }
        let test = order.split_off(n - n_test);
        let val = order.split_off(n - n_test - n_val);
        self.splits = Splits { train: order, val, test };
        Ok(())
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn read_idx(path: &Path, magic: u32, ndims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let header = 4 + 4 * ndims;
    if bytes.len() < 4 {
        return Err(Error::Truncated { path: path.into(), expected: header, found: bytes.len() });
    }
    let found = read_u32(&bytes, 0);
    if found != magic {
        return Err(Error::BadMagic { path: path.into(), expected: magic, found });
    }
    if bytes.len() < header {
        return Err(Error::Truncated { path: path.into(), expected: header, found: bytes.len() });
    }
    let dims: Vec<usize> = (0..ndims).map(|i| read_u32(&bytes, 4 + 4 * i) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::Truncated { path: path.into(), expected, found: bytes.len() });
    }
    Ok((dims, bytes[header..expected].to_vec()))
}

/// Loads an IDX image/label pair (magic `0x00000803` / `0x00000801`,
/// big-endian sizes). The class count is the largest label plus one, at
/// least 2.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (idims, pixels) = read_idx(images_path.as_ref(), IDX_IMAGES_MAGIC, 3)?;
    let (ldims, raw_labels) = read_idx(labels_path.as_ref(), IDX_LABELS_MAGIC, 1)?;
    if idims[0] != ldims[0] {
        return Err(Error::CountMismatch { images: idims[0], labels: ldims[0] });
    }
    let labels: Vec<usize> = raw_labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().copied().max().unwrap_or(0).max(1) + 1;
    Dataset::new(pixels, labels, 1, idims[1], idims[2], classes)
}

pub fn write_idx_images(path: impl AsRef<Path>, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let n = pixels.len() / (rows * cols);
    let mut f = fs::File::create(path)?;
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        f.write_all(&v.to_be_bytes())?;
    }
    f.write_all(pixels)?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
        f.write_all(&v.to_be_bytes())?;
    }
    f.write_all(labels)?;
    Ok(())
}

/// Class-conditional Gaussian blobs on a single channel.
///
/// Class `c` places a bright blob at angle `2πc/C` on a ring around the image
/// centre; each sample jitters the blob position and brightness and adds
/// pixel noise. Samples are interleaved by class.
pub fn synth_dataset(num_classes: usize, samples_per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if num_classes < 2 || samples_per_class == 0 || image_size < 4 {
        return Err(Error::Config(format!(
            "synthetic dataset needs >= 2 classes, >= 1 sample per class and image size >= 4 \
             (got {num_classes}, {samples_per_class}, {image_size})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = image_size as f64;
    let centre = (size - 1.0) / 2.0;
    let radius = size * 0.3;
    let sigma = size / 9.0;
    let n = num_classes * samples_per_class;
    let mut pixels = Vec::with_capacity(n * image_size * image_size);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..samples_per_class {
        for c in 0..num_classes {
            let angle = std::f64::consts::TAU * c as f64 / num_classes as f64;
            let cy = centre + radius * angle.sin() + 0.4 * rng.sample::<f64, _>(StandardNormal);
            let cx = centre + radius * angle.cos() + 0.4 * rng.sample::<f64, _>(StandardNormal);
            let amp = rng.gen_range(0.6..1.0);
            for y in 0..image_size {
                for x in 0..image_size {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let v = amp * (-d2 / (2.0 * sigma * sigma)).exp() + 0.12 * rng.sample::<f64, _>(StandardNormal);
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
            labels.push(c);
        }
    }
    Dataset::new(pixels, labels, 1, image_size, image_size, num_classes)
}
