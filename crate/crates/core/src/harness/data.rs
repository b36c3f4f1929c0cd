//! Labeled image sets: the synthetic texture task and CIFAR-10 binaries.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::TensorF;

/// Images `[n, H, W, C]` with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: TensorF,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(images: TensorF, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Dataset(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Dataset(format!(
                "label {l} out of range for {n_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[3]
    }

    fn image_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (TensorF, Vec<usize>) {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * len..(i + 1) * len]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let images = TensorF::new(shape, data).expect("batch shape matches data");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Number of samples per label.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Jitter ranges of the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    /// Stripe period range in pixels.
    pub period_min: f64,
    pub period_max: f64,
    /// Texture amplitude range.
    pub amp_min: f64,
    pub amp_max: f64,
    /// Blob radius (standard deviation) range in pixels.
    pub blob_min: f64,
    pub blob_max: f64,
    pub noise_std: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            period_min: 8.0,
            period_max: 24.0,
            amp_min: 0.2,
            amp_max: 0.8,
            blob_min: 3.0,
            blob_max: 8.0,
            noise_std: 0.1,
        }
    }
}

pub const SYNTH_CLASSES: usize = 4;

/// Train and validation sets of the 4-texture task (horizontal stripes,
/// vertical stripes, checkerboard, Gaussian blob) with default jitter.
pub fn synth_dataset(
    seed: u64,
    n_train: usize,
    n_val: usize,
    image_size: usize,
    n_classes: usize,
) -> Result<(Dataset, Dataset)> {
    synth_dataset_with(
        seed,
        n_train,
        n_val,
        image_size,
        n_classes,
        SynthParams::default(),
    )
}

pub fn synth_dataset_with(
    seed: u64,
    n_train: usize,
    n_val: usize,
    image_size: usize,
    n_classes: usize,
    params: SynthParams,
) -> Result<(Dataset, Dataset)> {
    if n_classes != SYNTH_CLASSES {
        return Err(Error::Dataset(format!(
            "the synthetic generator defines exactly 4 classes, {n_classes} requested"
        )));
    }
    if image_size < 16 {
        return Err(Error::Dataset(format!(
            "image_size {image_size} is below 16"
        )));
    }
    let train = synth_split(
        &mut SplitMix64::substream(seed, 0),
        n_train,
        image_size,
        &params,
    )?;
    let val = synth_split(
        &mut SplitMix64::substream(seed, 1),
        n_val,
        image_size,
        &params,
    )?;
    Ok((train, val))
}

fn synth_split(rng: &mut SplitMix64, n: usize, s: usize, p: &SynthParams) -> Result<Dataset> {
    let mut data = Vec::with_capacity(n * s * s * 3);
    let labels: Vec<usize> = (0..n).map(|i| i % SYNTH_CLASSES).collect();
    let mut texture = vec![0.0; s * s];
    for &class in &labels {
        let freq = 1.0 / rng.uniform(p.period_min, p.period_max);
        let phase = rng.uniform(0.0, TAU);
        let amp = rng.uniform(p.amp_min, p.amp_max);
        match class {
            0 | 1 => {
                for (i, t) in texture.iter_mut().enumerate() {
                    let coord = if class == 0 { i / s } else { i % s };
                    *t = (TAU * freq * coord as f64 + phase).sin();
                }
            }
            2 => {
                let phase_y = rng.uniform(0.0, TAU);
                for (i, t) in texture.iter_mut().enumerate() {
                    let (y, x) = ((i / s) as f64, (i % s) as f64);
                    *t = (TAU * freq * x + phase).sin() * (TAU * freq * y + phase_y).sin();
                }
            }
            _ => {
                let cx = rng.uniform(0.0, s as f64);
                let cy = rng.uniform(0.0, s as f64);
                let r = rng.uniform(p.blob_min, p.blob_max);
                for (i, t) in texture.iter_mut().enumerate() {
                    let (y, x) = ((i / s) as f64, (i % s) as f64);
                    let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                    *t = 2.0 * (-d2 / (2.0 * r * r)).exp() - 1.0;
                }
            }
        }
        let color = [
            rng.uniform(0.5, 1.0),
            rng.uniform(0.5, 1.0),
            rng.uniform(0.5, 1.0),
        ];
        for &t in &texture {
            for c in color {
                data.push(amp * t * c + p.noise_std * rng.normal());
            }
        }
    }
    Dataset::new(TensorF::new(vec![n, s, s, 3], data)?, labels, SYNTH_CLASSES)
}

pub const CIFAR_FILE_BYTES: u64 = 30_730_000;
const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Per-channel statistics of the raw train pixels (scaled to `[0, 1]`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Raw records of one batch file: labels and channel-planar pixel bytes.
fn read_cifar_file(path: &Path, limit: Option<usize>) -> Result<(Vec<usize>, Vec<u8>)> {
    let name = path.display();
    let mut f = File::open(path).map_err(|e| Error::Dataset(format!("{name}: {e}")))?;
    let len = f.metadata()?.len();
    if len != CIFAR_FILE_BYTES {
        return Err(Error::Dataset(format!(
            "{name}: expected {CIFAR_FILE_BYTES} bytes, found {len}"
        )));
    }
    let records = limit.map_or(10_000, |l| l.min(10_000));
    let mut buf = vec![0u8; records * CIFAR_RECORD];
    f.read_exact(&mut buf)?;
    let mut labels = Vec::with_capacity(records);
    let mut pixels = Vec::with_capacity(records * (CIFAR_RECORD - 1));
    for rec in buf.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::Dataset(format!(
                "{name}: label {} out of range",
                rec[0]
            )));
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

/// Channel means and standard deviations over planar records, one pass.
fn channel_stats(pixels: &[u8]) -> ChannelStats {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    for rec in pixels.chunks_exact(3 * plane) {
        for c in 0..3 {
            for &b in &rec[c * plane..(c + 1) * plane] {
                let v = b as f64 / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
    }
    let count = (pixels.len() / 3) as f64;
    let mean = sum.map(|s| s / count);
    let std = [0, 1, 2].map(|c| (sq[c] / count - mean[c] * mean[c]).max(0.0).sqrt());
    ChannelStats { mean, std }
}

/// Planar records to normalized `[n, 32, 32, 3]` images.
fn to_images(pixels: &[u8], stats: &ChannelStats) -> Result<TensorF> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let n = pixels.len() / (3 * plane);
    let mut data = Vec::with_capacity(pixels.len());
    for rec in pixels.chunks_exact(3 * plane) {
        for i in 0..plane {
            for c in 0..3 {
                let v = rec[c * plane + i] as f64 / 255.0;
                data.push((v - stats.mean[c]) / stats.std[c].max(1e-12));
            }
        }
    }
    TensorF::new(vec![n, CIFAR_SIDE, CIFAR_SIDE, 3], data)
}

/// Loads the CIFAR-10 binary batches from `dir` and normalizes both splits
/// with the train split's channel statistics. `limit` caps the records read
/// from each file.
pub fn load_cifar10(dir: &Path, limit: Option<usize>) -> Result<(Dataset, Dataset, ChannelStats)> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for f in CIFAR_TRAIN_FILES {
        let (l, p) = read_cifar_file(&dir.join(f), limit)?;
        labels.extend(l);
        pixels.extend(p);
    }
    let (test_labels, test_pixels) = read_cifar_file(&dir.join(CIFAR_TEST_FILE), limit)?;
    let stats = channel_stats(&pixels);
    let train = Dataset::new(to_images(&pixels, &stats)?, labels, 10)?;
    let test = Dataset::new(to_images(&test_pixels, &stats)?, test_labels, 10)?;
    Ok((train, test, stats))
}
