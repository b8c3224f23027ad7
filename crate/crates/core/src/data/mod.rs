//! Dataset files, batching, augmentation and residual images.

pub mod manifest;
pub mod netpbm;
pub mod synth;

use std::path::Path;

pub use manifest::{Manifest, ManifestEntry, MANIFEST_FILE, MANIFEST_HEADER};
pub use netpbm::{image_read_ppm, image_write_ppm, mask_write_pgm};
pub use synth::{attribute_region, render, synth_generate, union_region, ATTRIBUTE_NAMES};

use crate::error::{Error, Result};
use crate::model::LabelVector;
use crate::rng::SatRng;
use crate::tensor::{Float, Tensor};

const EPOCH_TAG: u64 = 0x6570_6f63;
const FLIP_TAG: u64 = 0x666c_6970;

#[derive(Clone, Debug)]
pub struct Sample {
    /// `(3, H, W)` in [-1, 1].
    pub image: Tensor<f32>,
    pub labels: LabelVector,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub domains: Vec<String>,
    pub image_size: usize,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `(N, 3, H, W)`.
    pub images: Tensor<f32>,
    /// `(N, n)` source labels.
    pub labels: Tensor<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset {
    pub fn new(domains: Vec<String>, samples: Vec<Sample>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Manifest("empty dataset".into()))?;
        let image_size = first.image.shape()[1];
        for s in &samples {
            if s.image.shape() != [3, image_size, image_size] {
                return Err(Error::InvalidShape(s.image.shape().to_vec(), "dataset images must share one square size"));
            }
            if s.labels.len() != domains.len() {
                return Err(Error::Manifest("label count differs from domain count".into()));
            }
        }
        Ok(Self { domains, image_size, samples })
    }

    /// Reads a manifest and every image it references.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::read(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let samples = manifest
            .entries
            .iter()
            .map(|e| {
                Ok(Sample {
                    image: image_read_ppm(&dir.join(&e.path))?,
                    labels: LabelVector(e.labels.iter().map(|&l| l as f64).collect()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest.domains, samples)
    }

    /// Accepts either a manifest file or a directory holding `manifest.txt`.
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Self::load(&path.join(MANIFEST_FILE))
        } else {
            Self::load(path)
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    /// First `n_first` samples and the rest.
    pub fn split(&self, n_first: usize) -> Result<(Dataset, Dataset)> {
        if n_first == 0 || n_first >= self.len() {
            return Err(Error::InvalidArgument(format!("cannot split {} samples at {n_first}", self.len())));
        }
        let (a, b) = self.samples.split_at(n_first);
        Ok((
            Dataset::new(self.domains.clone(), a.to_vec())?,
            Dataset::new(self.domains.clone(), b.to_vec())?,
        ))
    }

    /// Stacks the selected samples, mirroring those with `flips[i]` set.
    pub fn batch(&self, indices: &[usize], flips: &[bool]) -> Result<Batch> {
        let s = self.image_size;
        let per = 3 * s * s;
        let mut images = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len() * self.n_domains());
        for (k, &i) in indices.iter().enumerate() {
            let sample = self
                .samples
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("sample index {i} out of range")))?;
            if flips.get(k).copied().unwrap_or(false) {
                images.extend_from_slice(flip_image(&sample.image)?.data());
            } else {
                images.extend_from_slice(sample.image.data());
            }
            labels.extend(sample.labels.0.iter().map(|&l| l as f32));
        }
        Ok(Batch {
            images: Tensor::from_vec(images, &[indices.len(), 3, s, s])?,
            labels: Tensor::from_vec(labels, &[indices.len(), self.n_domains()])?,
        })
    }
}

fn flip_image(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = image.shape().to_vec();
    image.reshape(&[1, s[0], s[1], s[2]])?.flip_width()?.reshape(&s)
}

pub fn flip_sample(sample: &Sample) -> Result<Sample> {
    Ok(Sample { image: flip_image(&sample.image)?, labels: sample.labels.clone() })
}

/// Mirrors the width axis with probability 0.5; labels are untouched.
pub fn augment_flip(sample: &Sample, rng: &mut SatRng) -> Result<Sample> {
    if rng.bernoulli(0.5) {
        flip_sample(sample)
    } else {
        Ok(sample.clone())
    }
}

/// Channel-mean absolute difference halved into [0, 1]. Accepts `(3, H, W)`
/// (returns `(1, H, W)`) or `(N, 3, H, W)` (returns `(N, 1, H, W)`).
pub fn residual_image<T: Float>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch { op: "residual_image", lhs: x.shape().to_vec(), rhs: y.shape().to_vec() });
    }
    let s = x.shape();
    let (x4, y4) = match s.len() {
        3 => (x.reshape(&[1, s[0], s[1], s[2]])?, y.reshape(&[1, s[0], s[1], s[2]])?),
        4 => (x.clone(), y.clone()),
        _ => return Err(Error::InvalidShape(s.to_vec(), "expected (3,H,W) or (N,3,H,W)")),
    };
    let c = x4.shape()[1];
    let r = x4.sub(&y4)?.abs().sum_channels()?.scale(0.5 / c as f64);
    if s.len() == 3 {
        r.reshape(&[1, s[1], s[2]])
    } else {
        Ok(r)
    }
}

/// Deterministic epoch-permutation batching with per-sample flip draws. Batch
/// `iter` is a pure function of `(seed, iter)`.
#[derive(Clone, Copy, Debug)]
pub struct BatchSchedule {
    pub dataset_len: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl BatchSchedule {
    pub fn new(dataset_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || dataset_len < batch_size {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch_size} needs between 1 and {dataset_len} samples"
            )));
        }
        Ok(Self { dataset_len, batch_size, seed })
    }

    /// Full batches per epoch; a trailing partial batch is dropped.
    pub fn iters_per_epoch(&self) -> u64 {
        (self.dataset_len / self.batch_size) as u64
    }

    pub fn epoch_of(&self, iter: u64) -> f64 {
        iter as f64 / self.iters_per_epoch() as f64
    }

    pub fn indices(&self, iter: u64) -> Vec<usize> {
        let per = self.iters_per_epoch();
        let epoch = iter / per;
        let slot = (iter % per) as usize;
        let perm = SatRng::new(self.seed).fork(EPOCH_TAG).fork(epoch).permutation(self.dataset_len);
        perm[slot * self.batch_size..(slot + 1) * self.batch_size].to_vec()
    }

    pub fn flips(&self, iter: u64) -> Vec<bool> {
        let mut rng = SatRng::new(self.seed).fork(FLIP_TAG).fork(iter);
        (0..self.batch_size).map(|_| rng.bernoulli(0.5)).collect()
    }

    pub fn batch(&self, data: &Dataset, iter: u64, augment: bool) -> Result<Batch> {
        let flips = if augment { self.flips(iter) } else { vec![false; self.batch_size] };
        data.batch(&self.indices(iter), &flips)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(seed: u64) -> Sample {
        Sample {
            image: Tensor::create(&[3, 4, 4], crate::tensor::FillKind::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap(),
            labels: LabelVector(vec![1.0, 0.0]),
        }
    }

    #[test]
    fn flip_is_involution() {
        let s = sample(1);
        let back = flip_sample(&flip_sample(&s).unwrap()).unwrap();
        assert_eq!(back.image.data(), s.image.data());
        assert_eq!(back.labels, s.labels);
        assert_ne!(flip_sample(&s).unwrap().image.data(), s.image.data());
    }

    #[test]
    fn residual_examples() {
        let x = Tensor::<f32>::full(&[3, 2, 2], -1.0).unwrap();
        let y = Tensor::<f32>::full(&[3, 2, 2], 1.0).unwrap();
        let r = residual_image(&x, &y).unwrap();
        assert_eq!(r.shape(), &[1, 2, 2]);
        assert!(r.data().iter().all(|&v| v == 1.0));
        assert!(residual_image(&x, &x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(residual_image(&x, &Tensor::zeros(&[3, 2, 3]).unwrap()).is_err());
    }

    #[test]
    fn schedule_covers_each_epoch_once() {
        let s = BatchSchedule::new(10, 3, 4).unwrap();
        assert_eq!(s.iters_per_epoch(), 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|i| s.indices(i)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(s.indices(5), s.indices(5));
        assert_ne!(s.indices(0), s.indices(3));
        assert!(BatchSchedule::new(2, 3, 0).is_err());
    }
}
