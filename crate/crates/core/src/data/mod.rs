//! Datasets: MNIST IDX files, CIFAR-10 binary batches, class-stratified
//! subsets, per-epoch batching and spike encodings.

mod encode;
pub mod idx;

pub use encode::{encode_batch, one_hot, synth_poisson, EncodedBatch, EncodingMode};

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use idx::{read_idx, IdxArray, IMAGE_MAGIC, LABEL_MAGIC};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset<S> {
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor<S>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl<S: Scalar> LabeledDataset<S> {
    pub fn new(images: Tensor<S>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        images.expect_rank(4, "dataset", "images")?;
        if images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} images, {} labels", images.shape()[0], labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::invalid(
                "dataset",
                format!("label {bad} outside 0..{class_count}"),
            ));
        }
        if images
            .data()
            .iter()
            .any(|&v| !(v >= S::zero() && v <= S::one()))
        {
            return Err(Error::invalid("dataset", "pixel outside [0, 1]"));
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Copies the given samples, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let per = self.images.len() / self.len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.images.outer(i));
        }
        let [c, h, w] = self.sample_shape();
        Ok(LabeledDataset {
            images: Tensor::from_vec(&[indices.len(), c, h, w], data)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        })
    }

    /// Images and labels of `indices`, as one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<S>, Vec<usize>)> {
        let sub = self.select(indices)?;
        Ok((sub.images, sub.labels))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn bytes_to_images<S: Scalar>(dims: &[usize], data: &[u8]) -> Result<Tensor<S>> {
    let scale = S::lit(255.0);
    let pixels = data.iter().map(|&b| S::lit(b as f64) / scale).collect();
    Tensor::from_vec(dims, pixels)
}

/// Loads an MNIST-style image/label file pair. Pixels are scaled by 1/255.
pub fn load_mnist_idx<S: Scalar>(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset<S>> {
    let images: IdxArray = read_idx(images_path, IMAGE_MAGIC)?;
    let labels: IdxArray = read_idx(labels_path, LABEL_MAGIC)?;
    if images.dims[0] != labels.dims[0] {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 4,
            detail: format!(
                "label count {} does not match image count {}",
                labels.dims[0], images.dims[0]
            ),
        });
    }
    let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    let tensor = bytes_to_images(&[n, 1, h, w], &images.data)?;
    let labels: Vec<usize> = labels.data.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    LabeledDataset::new(tensor, labels, classes)
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Loads CIFAR-10 binary batch files (1 label byte + 3072 pixel bytes per
/// record, channel-major), concatenated in the order given.
pub fn load_cifar_batches<S: Scalar>(paths: &[&Path]) -> Result<LabeledDataset<S>> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for &path in paths {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        if raw.is_empty() || raw.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (raw.len() - raw.len() % CIFAR_RECORD) as u64,
                detail: format!("length {} is not a multiple of {CIFAR_RECORD}", raw.len()),
            });
        }
        for (r, rec) in raw.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] >= 10 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: (r * CIFAR_RECORD) as u64,
                    detail: format!("label byte {} out of range", rec[0]),
                });
            }
            labels.push(rec[0] as usize);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    let images = bytes_to_images(&[labels.len(), 3, 32, 32], &pixels)?;
    LabeledDataset::new(images, labels, 10)
}

/// Class-stratified train/test split.
///
/// Each class contributes `n / K` samples (the first `n % K` classes one
/// more) to each side, drawn without replacement from a seeded shuffle of
/// that class. Both sides keep the dataset's original sample order.
pub fn subset<S: Scalar>(
    dataset: &LabeledDataset<S>,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(LabeledDataset<S>, LabeledDataset<S>)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::invalid("subset", "both sides need at least one sample"));
    }
    let k = dataset.class_count;
    let quota = |n: usize, c: usize| n / k + usize::from(c < n % k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n_test);
    for c in 0..k {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == c)
            .collect();
        let (a, b) = (quota(n_train, c), quota(n_test, c));
        if members.len() < a + b {
            return Err(Error::invalid(
                "subset",
                format!(
                    "class {c} has {} samples, {a} train + {b} test requested",
                    members.len()
                ),
            ));
        }
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..a]);
        test.extend_from_slice(&members[a..a + b]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.select(&train)?, dataset.select(&test)?))
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1)));
    order.shuffle(&mut rng);
    order
}
