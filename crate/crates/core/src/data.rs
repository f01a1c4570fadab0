//! IDX (MNIST, Fashion-MNIST) and CIFAR-10 binary loaders, plus seeded batching.
//!
//! Expected layout under a data directory:
//!
//! ```text
//! mnist/    train-images-idx3-ubyte  train-labels-idx1-ubyte
//!           t10k-images-idx3-ubyte   t10k-labels-idx1-ubyte
//! fashion/  (same four file names as mnist/)
//! cifar10/  data_batch_1.bin .. data_batch_5.bin  test_batch.bin
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Fashion,
    Cifar10,
}

impl DatasetKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Fashion => "fashion",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(self) -> [usize; 3] {
        match self {
            DatasetKind::Cifar10 => [3, 32, 32],
            _ => [1, 28, 28],
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "fashion" => Ok(DatasetKind::Fashion),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Config(format!(
                "unknown dataset `{other}` (expected one of: mnist fashion cifar10)"
            ))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// Images `[N, C, H, W]` in `[0, 1]` and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        images.expect_rank("dataset", 4)?;
        if images.shape()[0] != labels.len() {
            return Err(Error::shape("dataset", "label count", images.shape()[0], labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::shape("dataset", "label (class count)", classes, bad));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// The first `n` samples (all of them if `n` exceeds the size).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let per = self.images.numel() / self.len().max(1);
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.images.outer(i));
        }
        let [c, h, w] = self.image_shape();
        Dataset {
            images: Tensor::new(&[indices.len(), c, h, w], data).expect("consistent shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

fn be_u32(bytes: &[u8], at: usize, kind: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(kind, format!("truncated header at byte {at}")))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Parse an IDX image file (magic `0x803`) and label file (magic `0x801`)
/// already in memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0, "idx images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format("idx images", format!("bad magic {magic:#010x}, expected 0x00000803")));
    }
    let magic = be_u32(labels, 0, "idx labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format("idx labels", format!("bad magic {magic:#010x}, expected 0x00000801")));
    }
    let n = be_u32(images, 4, "idx images")? as usize;
    let rows = be_u32(images, 8, "idx images")? as usize;
    let cols = be_u32(images, 12, "idx images")? as usize;
    let n_labels = be_u32(labels, 4, "idx labels")? as usize;
    if n != n_labels {
        return Err(Error::format("idx", format!("{n} images but {n_labels} labels")));
    }
    let pixels = n * rows * cols;
    let body = images
        .get(16..16 + pixels)
        .ok_or_else(|| Error::format("idx images", format!("truncated: need {pixels} pixel bytes, have {}", images.len().saturating_sub(16))))?;
    let lab = labels
        .get(8..8 + n)
        .ok_or_else(|| Error::format("idx labels", format!("truncated: need {n} label bytes, have {}", labels.len().saturating_sub(8))))?;
    let data = body.iter().map(|&b| f32::from(b) / 255.0).collect();
    let labels: Vec<usize> = lab.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(Tensor::new(&[n, 1, rows, cols], data)?, labels, classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    parse_idx(&read(images_path)?, &read(labels_path)?)
}

/// Parse concatenated CIFAR-10 records: one label byte then 3072 pixel
/// bytes (R, G, B planes of 32×32).
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(
            "cifar10",
            format!("length {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Dataset::new(Tensor::new(&[n, 3, 32, 32], data)?, labels, 10)
}

pub fn load_cifar10(batch_files: &[PathBuf]) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for f in batch_files {
        let b = read(f)?;
        if b.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                "cifar10",
                format!("{}: length {} is not a multiple of {CIFAR_RECORD}", f.display(), b.len()),
            ));
        }
        bytes.extend(b);
    }
    parse_cifar10(&bytes)
}

/// Load one split of a dataset from the standard layout under `data_dir`.
pub fn load(data_dir: &Path, kind: DatasetKind, split: Split) -> Result<Dataset> {
    let dir = data_dir.join(kind.dir_name());
    match kind {
        DatasetKind::Mnist | DatasetKind::Fashion => {
            let prefix = match split {
                Split::Train => "train",
                Split::Test => "t10k",
            };
            load_idx(
                &dir.join(format!("{prefix}-images-idx3-ubyte")),
                &dir.join(format!("{prefix}-labels-idx1-ubyte")),
            )
        }
        DatasetKind::Cifar10 => {
            let files: Vec<PathBuf> = match split {
                Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
                Split::Test => vec![dir.join("test_batch.bin")],
            };
            load_cifar10(&files)
        }
    }
}

/// Sample order for one epoch: a seeded permutation, or identity order.
pub fn epoch_order(len: usize, seed: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

/// Batches of `(images, labels)`; the final short batch is included.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    Ok(Batches {
        dataset,
        order: epoch_order(dataset.len(), seed, shuffle),
        batch_size,
        pos: 0,
    })
}

pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor<f32>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let sel = self.dataset.select(&self.order[self.pos..end]);
        self.pos = end;
        Some((sel.images, sel.labels))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}
