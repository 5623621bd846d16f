use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Augment {
    pub flip: bool,
    /// Zero padding for random crops; 0 disables cropping.
    pub crop_pad: usize,
}

/// Images stored as `[N, C, H, W]` in `f32` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub train_images: Vec<f32>,
    pub train_labels: Vec<usize>,
    pub eval_images: Vec<f32>,
    pub eval_labels: Vec<usize>,
    pub augment: Augment,
    /// Per-channel statistics of the raw training images, once normalized.
    pub normalization: Option<(Vec<f32>, Vec<f32>)>,
}

impl Dataset {
    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn train_len(&self) -> usize {
        self.train_labels.len()
    }

    pub fn eval_len(&self) -> usize {
        self.eval_labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.image_len();
        if self.train_images.len() != n * self.train_labels.len()
            || self.eval_images.len() != n * self.eval_labels.len()
        {
            return Err(Error::shape(
                "dataset",
                "image buffer does not match label count",
            ));
        }
        if let Some(&bad) = self
            .train_labels
            .iter()
            .chain(&self.eval_labels)
            .find(|&&l| l >= self.num_classes)
        {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Standardizes every channel with the training-set mean and standard
    /// deviation. Fails if already applied.
    pub fn normalize(&mut self) -> Result<()> {
        if self.normalization.is_some() {
            return Err(Error::invalid("dataset is already normalized"));
        }
        if self.train_labels.is_empty() {
            return Err(Error::invalid("cannot normalize an empty training set"));
        }
        let (c, hw) = (self.channels, self.height * self.width);
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for img in self.train_images.chunks(c * hw) {
            for ch in 0..c {
                for &v in &img[ch * hw..(ch + 1) * hw] {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (self.train_labels.len() * hw) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / count - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        for buf in [&mut self.train_images, &mut self.eval_images] {
            for img in buf.chunks_mut(c * hw) {
                for ch in 0..c {
                    for v in &mut img[ch * hw..(ch + 1) * hw] {
                        *v = ((*v as f64 - mean[ch]) / std[ch]) as f32;
                    }
                }
            }
        }
        self.normalization = Some((
            mean.iter().map(|&m| m as f32).collect(),
            std.iter().map(|&s| s as f32).collect(),
        ));
        Ok(())
    }

    fn gather<T: Scalar>(
        &self,
        images: &[f32],
        labels: &[usize],
        idx: &[usize],
        aug: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        let n = self.image_len();
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut out = Vec::with_capacity(idx.len() * n);
        let mut rng = aug;
        for &i in idx {
            let img = &images[i * n..(i + 1) * n];
            let (flip, dy, dx) = match rng.as_deref_mut() {
                Some(r) if self.augment.flip || self.augment.crop_pad > 0 => {
                    let flip = self.augment.flip && r.random_bool(0.5);
                    let p = self.augment.crop_pad as i64;
                    let (dy, dx) = if p > 0 {
                        (
                            r.random_range(-p..=p) as isize,
                            r.random_range(-p..=p) as isize,
                        )
                    } else {
                        (0, 0)
                    };
                    (flip, dy, dx)
                }
                _ => (false, 0, 0),
            };
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sy = y as isize + dy;
                        let sx0 = if flip {
                            (w - 1 - x) as isize
                        } else {
                            x as isize
                        };
                        let sx = sx0 + dx;
                        let v = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            0.0
                        } else {
                            img[(ch * h + sy as usize) * w + sx as usize]
                        };
                        out.push(T::of(v as f64));
                    }
                }
            }
        }
        let t = Tensor::from_vec(vec![idx.len(), c, h, w], out)?;
        Ok((t, idx.iter().map(|&i| labels[i]).collect()))
    }

    /// Training batch with augmentation drawn from `rng`.
    pub fn train_batch<T: Scalar>(
        &self,
        idx: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        self.gather(&self.train_images, &self.train_labels, idx, Some(rng))
    }

    /// Training images without augmentation.
    pub fn train_batch_plain<T: Scalar>(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        self.gather(&self.train_images, &self.train_labels, idx, None)
    }

    pub fn eval_batch<T: Scalar>(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        self.gather(&self.eval_images, &self.eval_labels, idx, None)
    }

    /// Shuffled training order for one epoch.
    pub fn epoch_order(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train_len()).collect();
        order.shuffle(rng);
        order
    }
}

/// Parses CIFAR-10 binary records: one label byte and 3072 pixel bytes
/// (red, green, blue planes of 32x32). Pixels are scaled to `[0, 1]`.
pub fn parse_cifar10_records(bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Malformed(format!(
            "CIFAR-10 data must be a positive multiple of {CIFAR_RECORD} bytes, got {}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Malformed(format!(
                "record {i}: label {label} out of range"
            )));
        }
        labels.push(label);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((images, labels))
}

pub fn read_cifar10_file(path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let bytes = std::fs::read(path)?;
    parse_cifar10_records(&bytes).map_err(|e| match e {
        Error::Malformed(m) => Error::Malformed(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads `data_batch_*.bin` for training and `test_batch.bin` for
/// evaluation from a directory, then normalizes.
pub fn load_cifar10_binary(dir: &Path) -> Result<Dataset> {
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{i}.bin"));
        if p.exists() {
            let (im, lb) = read_cifar10_file(&p)?;
            train_images.extend(im);
            train_labels.extend(lb);
        }
    }
    if train_labels.is_empty() {
        return Err(Error::invalid(format!(
            "no data_batch_*.bin files in {}",
            dir.display()
        )));
    }
    let (eval_images, eval_labels) = read_cifar10_file(&dir.join("test_batch.bin"))?;
    let mut ds = Dataset {
        channels: 3,
        height: 32,
        width: 32,
        num_classes: 10,
        train_images,
        train_labels,
        eval_images,
        eval_labels,
        augment: Augment::default(),
        normalization: None,
    };
    ds.normalize()?;
    Ok(ds)
}

/// Class-conditioned Gaussian images: each class has a mean image made of
/// a few colored Gaussian blobs, rescaled so the closest pair of class
/// means is `separation * sigma` apart; samples add i.i.d. `N(0, sigma^2)`
/// pixel noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub channels: usize,
    pub size: usize,
    pub blobs_per_class: usize,
    pub separation: f64,
    pub sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_class: 100,
            eval_per_class: 50,
            channels: 3,
            size: 32,
            blobs_per_class: 3,
            separation: 10.0,
            sigma: 1.0,
        }
    }
}

/// Class mean images `[classes][C*H*W]` of a synthetic spec.
pub fn synthetic_means(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Vec<f64>>> {
    if spec.num_classes < 2 || spec.channels == 0 || spec.size == 0 || spec.blobs_per_class == 0 {
        return Err(Error::invalid(
            "synthetic spec needs >= 2 classes and positive channels, size, blobs",
        ));
    }
    if !(spec.separation > 0.0 && spec.sigma > 0.0) {
        return Err(Error::invalid(
            "synthetic separation and sigma must be positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, s) = (spec.channels, spec.size);
    let mut means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let mut m = vec![0.0; c * s * s];
            for _ in 0..spec.blobs_per_class {
                let cy = rng.random_range(0.0..s as f64);
                let cx = rng.random_range(0.0..s as f64);
                let width = rng.random_range(2.0..0.2 * s as f64 + 2.0);
                let color: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                for y in 0..s {
                    for x in 0..s {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        let g = (-d2 / (2.0 * width * width)).exp();
                        for (ch, &col) in color.iter().enumerate() {
                            m[(ch * s + y) * s + x] += col * g;
                        }
                    }
                }
            }
            m
        })
        .collect();
    let mut min_d = f64::INFINITY;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let d: f64 = means[i]
                .iter()
                .zip(&means[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            min_d = min_d.min(d);
        }
    }
    if !(min_d > 0.0) {
        return Err(Error::invalid("synthetic class means coincide"));
    }
    let k = spec.separation * spec.sigma / min_d;
    means
        .iter_mut()
        .for_each(|m| m.iter_mut().for_each(|v| *v *= k));
    Ok(means)
}

/// Synthetic dataset, normalized. Train and eval samples are interleaved
/// by class and drawn from one stream seeded by `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let means = synthetic_means(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_DA7A);
    let draw = |n_per: usize, rng: &mut ChaCha8Rng| {
        let mut images = Vec::with_capacity(n_per * spec.num_classes * means[0].len());
        let mut labels = Vec::with_capacity(n_per * spec.num_classes);
        for _ in 0..n_per {
            for (cls, m) in means.iter().enumerate() {
                images.extend(m.iter().map(|&mu| {
                    let z: f64 = StandardNormal.sample(rng);
                    (mu + spec.sigma * z) as f32
                }));
                labels.push(cls);
            }
        }
        (images, labels)
    };
    let (train_images, train_labels) = draw(spec.train_per_class, &mut rng);
    let (eval_images, eval_labels) = draw(spec.eval_per_class, &mut rng);
    let mut ds = Dataset {
        channels: spec.channels,
        height: spec.size,
        width: spec.size,
        num_classes: spec.num_classes,
        train_images,
        train_labels,
        eval_images,
        eval_labels,
        augment: Augment::default(),
        normalization: None,
    };
    ds.validate()?;
    ds.normalize()?;
    Ok(ds)
}
