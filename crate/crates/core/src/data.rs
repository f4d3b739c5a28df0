//! Datasets: MNIST IDX and CIFAR-10 binary loaders, synthetic blobs, and
//! seeded mini-batch iteration.
//!
//! Pixels are scaled to `[0, 1]` by `1/255` with no mean subtraction.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder};
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{keyed, standard_normals, Purpose};
use crate::tensor::{Batch, Shape};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `len × shape.len()` values, example-major.
    pub images: Vec<f64>,
    pub shape: Shape,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(
        images: Vec<f64>,
        shape: Shape,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if images.len() != labels.len() * shape.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} examples of {shape}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::DimensionMismatch(format!(
                "label {bad} outside 0..{class_count}"
            )));
        }
        Ok(Self {
            images,
            shape,
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

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.shape.len();
        &self.images[i * d..(i + 1) * d]
    }

    /// Gathers the given examples into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Batch, Vec<usize>) {
        let d = self.shape.len();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Batch {
                rows: indices.len(),
                cols: d,
                data,
            },
            labels,
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (b, labels) = self.batch(indices);
        Self {
            images: b.data,
            shape: self.shape,
            labels,
            class_count: self.class_count,
        }
    }

    /// The first `k` examples of every class, in original order.
    pub fn first_k_per_class(&self, k: usize) -> Self {
        let mut seen = vec![0usize; self.class_count];
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = self.labels[i];
                seen[c] += 1;
                seen[c] <= k
            })
            .collect();
        self.subset(&keep)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?
        .read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(bytes: &[u8], words: usize, path: &Path) -> Result<Vec<u32>> {
    if bytes.len() < 4 * words {
        return Err(Error::DimensionMismatch(format!(
            "{}: header needs {} bytes, file has {}",
            path.display(),
            4 * words,
            bytes.len()
        )));
    }
    Ok((0..words)
        .map(|i| BigEndian::read_u32(&bytes[4 * i..]))
        .collect())
}

fn check_magic(path: &Path, found: u32, expected: u32) -> Result<()> {
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Parses an IDX image/label pair (plain or gzip-compressed).
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_maybe_gz(images_path)?;
    let h = header(&img, 4, images_path)?;
    check_magic(images_path, h[0], IDX_IMAGES_MAGIC)?;
    let (count, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    let pixels = &img[16..];
    if pixels.len() != count * rows * cols {
        return Err(Error::DimensionMismatch(format!(
            "{}: header promises {count}×{rows}×{cols} pixels, file holds {}",
            images_path.display(),
            pixels.len()
        )));
    }

    let lab = read_maybe_gz(labels_path)?;
    let h = header(&lab, 2, labels_path)?;
    check_magic(labels_path, h[0], IDX_LABELS_MAGIC)?;
    let label_count = h[1] as usize;
    let label_bytes = &lab[8..];
    if label_bytes.len() != label_count {
        return Err(Error::DimensionMismatch(format!(
            "{}: header promises {label_count} labels, file holds {}",
            labels_path.display(),
            label_bytes.len()
        )));
    }
    if label_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    Dataset::new(
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
        Shape::new(1, rows, cols),
        label_bytes.iter().map(|&l| usize::from(l)).collect(),
        10,
    )
}

/// Concatenates CIFAR-10 binary batches (label byte + R, G, B planes per record).
pub fn load_cifar10_bin(paths: &[PathBuf]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_maybe_gz(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::TruncatedRecord {
                path: path.clone(),
                len: bytes.len(),
                record: CIFAR_RECORD,
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(usize::from(rec[0]));
            images.extend(rec[1..].iter().map(|&p| f64::from(p) / 255.0));
        }
    }
    Dataset::new(images, Shape::new(3, CIFAR_SIDE, CIFAR_SIDE), labels, 10)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

fn existing(dir: &Path, name: &str) -> PathBuf {
    let plain = dir.join(name);
    let gz = dir.join(format!("{name}.gz"));
    if !plain.exists() && gz.exists() {
        gz
    } else {
        plain
    }
}

/// Standard file names (`train-images-idx3-ubyte[.gz]`, ...) inside `dir`.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        existing(dir, &format!("{prefix}-images-idx3-ubyte")),
        existing(dir, &format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn cifar10_paths(dir: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Train => (1..=5)
            .map(|i| existing(dir, &format!("data_batch_{i}.bin")))
            .collect(),
        Split::Test => vec![existing(dir, "test_batch.bin")],
    }
}

pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let (i, l) = mnist_paths(dir, split);
    load_mnist_idx(&i, &l)
}

pub fn load_cifar10_dir(dir: &Path, split: Split) -> Result<Dataset> {
    load_cifar10_bin(&cifar10_paths(dir, split))
}

/// Isotropic unit-variance Gaussian blobs. Class `c` is centred at
/// `(separation/√2)·e_c`, so every pair of centres is `separation` apart.
pub fn synthetic_blobs(
    classes: usize,
    per_class: usize,
    dims: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || dims == 0 {
        return Err(Error::EmptyDataset);
    }
    if classes > dims {
        return Err(Error::InvalidArgument(format!(
            "{classes} classes need at least {classes} dimensions"
        )));
    }
    let offset = separation / std::f64::consts::SQRT_2;
    let mut images = Vec::with_capacity(classes * per_class * dims);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let mut rng = keyed(seed, Purpose::Synthetic, c as u64, 0, 0);
        for _ in 0..per_class {
            let mut x = standard_normals(&mut rng, dims);
            x[c] += offset;
            images.extend(x);
            labels.push(c);
        }
    }
    Dataset::new(images, Shape::flat(dims), labels, classes)
}

/// Seeded shuffle of `0..len` cut into batches; the last batch may be short.
pub fn minibatches(
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut keyed(seed, Purpose::Shuffle, epoch, 0, 0));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn blobs_are_deterministic_and_validated() {
        let a = synthetic_blobs(2, 10, 3, 10.0, 4).unwrap();
        let b = synthetic_blobs(2, 10, 3, 10.0, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synthetic_blobs(2, 10, 3, 10.0, 5).unwrap());
        assert!(matches!(
            synthetic_blobs(2, 0, 3, 10.0, 4),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn blobs_with_ten_sigma_are_linearly_separable() {
        // The bisecting hyperplane x_0 − x_1 = 0 is the Bayes classifier; its
        // error is Φ(−5) ≈ 3e-7 per point.
        let d = synthetic_blobs(2, 2000, 4, 10.0, 1).unwrap();
        let correct = (0..d.len())
            .filter(|&i| {
                let x = d.image(i);
                usize::from(x[1] > x[0]) == d.labels[i]
            })
            .count();
        assert!(correct as f64 / d.len() as f64 > 0.99);
    }

    #[test]
    fn first_k_per_class_keeps_order() {
        let d = Dataset::new(vec![0.0; 6], Shape::flat(1), vec![0, 1, 0, 0, 1, 1], 2).unwrap();
        let s = d.first_k_per_class(2);
        assert_eq!(s.labels, vec![0, 1, 0, 1]);
    }

    #[test]
    fn full_batch_is_a_permutation() {
        let b = minibatches(10, 10, 3, 0).unwrap();
        assert_eq!(b.len(), 1);
        let mut v = b[0].clone();
        v.sort_unstable();
        assert_eq!(v, (0..10).collect::<Vec<_>>());
        assert_eq!(
            minibatches(10, 3, 3, 7).unwrap(),
            minibatches(10, 3, 3, 7).unwrap()
        );
        assert_ne!(
            minibatches(50, 50, 3, 0).unwrap(),
            minibatches(50, 50, 3, 1).unwrap()
        );
        assert!(minibatches(10, 0, 3, 0).is_err());
    }

    proptest! {
        #[test]
        fn batches_partition_indices(len in 0usize..200, bs in 1usize..40, seed in any::<u64>(), epoch in 0u64..5) {
            let batches = minibatches(len, bs, seed, epoch).unwrap();
            prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
            let mut all: Vec<usize> = batches.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        }
    }
}
