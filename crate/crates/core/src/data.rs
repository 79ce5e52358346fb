//! Image-classification datasets: a seeded synthetic generator, the raw
//! `images.bin` + `labels.csv` format, and mini-batch ordering.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::rng::{substream, Stream};

/// Images in `[0, 1]`, stored `[M, C, H, W]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Stacks the given items into a `[B, C, H, W]` tensor plus labels.
    pub fn batch<F: Scalar>(&self, indices: &[usize]) -> (Tensor<F>, Vec<usize>) {
        let mut values = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            values.extend(self.image(i).iter().map(|v| F::of(*v as f64)));
        }
        let shape = [indices.len(), self.channels, self.height, self.width];
        let images = Tensor::new(&shape, values).expect("dataset layout");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` items (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            split: self.split.clone(),
            ..*self
        }
    }
}

/// Noise amplitude of the synthetic background.
const SYNTH_NOISE: f64 = 0.15;

/// One synthetic image: uniform background noise plus a Gaussian blob.
///
/// The blob center lies inside quadrant `label` (0 upper-left, 1 upper-right,
/// 2 lower-left, 3 lower-right). Pure function of `(seed, index)`.
pub fn synth_blob_image(seed: u64, index: u64, image_size: usize, num_classes: usize) -> (Vec<f32>, usize) {
    let mut rng = substream(seed, Stream::DataGen, index);
    let label = rng.random_range(0..num_classes);
    let s = image_size as f64;
    let half = s / 2.0;
    let margin = s / 16.0;
    let sigma = s / 16.0;
    let (qx, qy) = ((label % 2) as f64 * half, (label / 2) as f64 * half);
    let cx = qx + rng.random_range(margin..half - margin);
    let cy = qy + rng.random_range(margin..half - margin);
    let mut pixels = Vec::with_capacity(image_size * image_size);
    for y in 0..image_size {
        for x in 0..image_size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d2 = (px - cx).powi(2) + (py - cy).powi(2);
            let blob = (-d2 / (2.0 * sigma * sigma)).exp();
            let noise: f64 = rng.random_range(0.0..SYNTH_NOISE);
            pixels.push((noise + blob).clamp(0.0, 1.0) as f32);
        }
    }
    (pixels, label)
}

/// Synthetic single-channel blob dataset of `count` items starting at item `first`.
pub fn synth_blobs_range(
    seed: u64,
    first: usize,
    count: usize,
    image_size: usize,
    num_classes: usize,
) -> Result<Dataset> {
    if image_size < 8 {
        return Err(Error::Config(format!(
            "image_size must be at least 8, got {image_size}"
        )));
    }
    if !(2..=4).contains(&num_classes) {
        return Err(Error::Config(format!(
            "synthetic blobs support 2 to 4 classes, got {num_classes}"
        )));
    }
    let mut images = Vec::with_capacity(count * image_size * image_size);
    let mut labels = Vec::with_capacity(count);
    for i in first..first + count {
        let (img, label) = synth_blob_image(seed, i as u64, image_size, num_classes);
        images.extend(img);
        labels.push(label);
    }
    Ok(Dataset {
        images,
        labels,
        channels: 1,
        height: image_size,
        width: image_size,
        num_classes,
        split: format!("synth_blobs[{first}..{})", first + count),
    })
}

pub fn synth_blobs(seed: u64, count: usize, image_size: usize, num_classes: usize) -> Result<Dataset> {
    synth_blobs_range(seed, 0, count, image_size, num_classes)
}

/// Disjoint train/test splits drawn from one synthetic stream.
pub fn synth_split(
    seed: u64,
    train: usize,
    test: usize,
    image_size: usize,
    num_classes: usize,
) -> Result<(Dataset, Dataset)> {
    let mut tr = synth_blobs_range(seed, 0, train, image_size, num_classes)?;
    let mut te = synth_blobs_range(seed, train, test, image_size, num_classes)?;
    tr.split = "train".into();
    te.split = "test".into();
    Ok((tr, te))
}

/// Reads `images.bin` (four little-endian `u32` M, C, H, W then `M*C*H*W` bytes)
/// and `labels.csv` (one integer per line).
pub fn load_raw(dir: &Path, num_classes: usize) -> Result<Dataset> {
    let img_path = dir.join("images.bin");
    let bytes = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
    if bytes.len() < 16 {
        return Err(Error::Format(format!(
            "images.bin header needs 16 bytes, found {}",
            bytes.len()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().expect("4 bytes")) as usize;
    let (m, c, h, w) = (word(0), word(1), word(2), word(3));
    let expected = m * c * h * w;
    let body = &bytes[16..];
    if body.len() != expected {
        return Err(Error::Format(format!(
            "images.bin header {m}x{c}x{h}x{w} needs {expected} pixel bytes, found {}",
            body.len()
        )));
    }
    let lab_path = dir.join("labels.csv");
    let text = fs::read_to_string(&lab_path).map_err(|e| Error::io(&lab_path, e))?;
    let labels = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse::<usize>()
                .map_err(|_| Error::Format(format!("labels.csv line {}: not an integer: {l:?}", i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    if labels.len() != m {
        return Err(Error::Format(format!(
            "images.bin holds {m} images but labels.csv has {} labels",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|l| **l >= num_classes) {
        return Err(Error::Format(format!("label {bad} outside [0, {num_classes})")));
    }
    Ok(Dataset {
        images: body.iter().map(|b| *b as f32 / 255.0).collect(),
        labels,
        channels: c,
        height: h,
        width: w,
        num_classes,
        split: dir.display().to_string(),
    })
}

/// Writes a dataset in the `load_raw` format, quantizing pixels to bytes.
pub fn save_raw(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(16 + ds.images.len());
    for v in [ds.len(), ds.channels, ds.height, ds.width] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    bytes.extend(ds.images.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let img_path = dir.join("images.bin");
    fs::write(&img_path, bytes).map_err(|e| Error::io(&img_path, e))?;
    let lab_path = dir.join("labels.csv");
    let mut f = fs::File::create(&lab_path).map_err(|e| Error::io(&lab_path, e))?;
    for l in &ds.labels {
        writeln!(f, "{l}").map_err(|e| Error::io(&lab_path, e))?;
    }
    Ok(())
}

/// Shuffled index batches for one epoch; pure function of `(seed, epoch)`.
/// The final partial batch is kept.
pub fn minibatches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut substream(seed, Stream::DataOrder, epoch));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
