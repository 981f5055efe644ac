//! Datasets: IDX and CIFAR-10 binary loaders, seeded synthetic data and
//! deterministic batching.
//!
//! All randomness uses ChaCha8 seeded through `seed_from_u64`, so the
//! synthetic data and shuffles are identical on every platform.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Unsigned-byte images with an explicit channel axis, `N×C×H×W`.
pub const IDX_IMAGES_CHW_MAGIC: u32 = 0x0000_0804;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;
const CIFAR_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    labels: Vec<usize>,
    shape: [usize; 3],
    num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<f64>,
        labels: Vec<usize>,
        shape: [usize; 3],
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if images.len() != labels.len() * per {
            return Err(Error::shape(
                "dataset",
                format!(
                    "{} pixel values for {} images of shape {shape:?}",
                    images.len(),
                    labels.len()
                ),
            ));
        }
        if let Some(&p) = images.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Input(format!("pixel value {p} outside [0, 1]")));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Index {
                what: "dataset classes",
                index: y,
                bound: num_classes,
            });
        }
        Ok(Self {
            images,
            labels,
            shape,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Stacks the given samples into a `B×C×H×W` tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.shape;
        let x = Tensor::new([indices.len(), c, h, w], data).expect("gathered batch shape");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Samples with label `class`, in dataset order.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] == class)
            .collect()
    }

    /// Appends another dataset with the same geometry.
    pub fn concat(mut self, other: Dataset) -> Result<Dataset> {
        if self.shape != other.shape || self.num_classes != other.num_classes {
            return Err(Error::shape(
                "concat",
                "datasets differ in image shape or class count",
            ));
        }
        self.images.extend(other.images);
        self.labels.extend(other.labels);
        Ok(self)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}

fn be_u32(bytes: &[u8], at: usize, file: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::Truncated(file.to_string()).into())
}

fn magic_dims(bytes: &[u8]) -> u8 {
    bytes.get(3).copied().unwrap_or(0)
}

/// Loads an IDX image/label pair. Images are `N×H×W` (MNIST layout) or
/// `N×C×H×W`. Pixels map to `byte/255`; the class count is one more than
/// the largest label.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (iname, lname) = (ip.display().to_string(), lp.display().to_string());
    let ib = read_file(ip)?;
    let lb = read_file(lp)?;

    let magic = be_u32(&ib, 0, &iname)?;
    if magic != IDX_IMAGES_MAGIC && magic != IDX_IMAGES_CHW_MAGIC {
        return Err(DataError::Magic {
            file: iname,
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        }
        .into());
    }
    let magic = be_u32(&lb, 0, &lname)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::Magic {
            file: lname,
            found: magic,
            expected: IDX_LABELS_MAGIC,
        }
        .into());
    }
    let n = be_u32(&ib, 4, &iname)? as usize;
    let (channels, header) = if magic_dims(&ib) == 4 {
        (be_u32(&ib, 8, &iname)? as usize, 20)
    } else {
        (1, 16)
    };
    let rows = be_u32(&ib, header - 8, &iname)? as usize;
    let cols = be_u32(&ib, header - 4, &iname)? as usize;
    let nl = be_u32(&lb, 4, &lname)? as usize;
    if n != nl {
        return Err(DataError::CountMismatch {
            images: n,
            labels: nl,
        }
        .into());
    }
    let per = channels * rows * cols;
    let pixels = &ib[header..];
    if pixels.len() < n * per {
        return Err(DataError::Truncated(iname).into());
    }
    let labels_raw = &lb[8..];
    if labels_raw.len() < n {
        return Err(DataError::Truncated(lname).into());
    }
    let images = pixels[..n * per]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = labels_raw[..n].iter().map(|&b| b as usize).collect();
    let k = labels.iter().max().map_or(1, |m| m + 1).max(2);
    Dataset::new(images, labels, [channels, rows, cols], k, split)
}

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar_binary(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let name = path.display().to_string();
        let bytes = read_file(path)?;
        if bytes.len() % CIFAR_RECORD_LEN != 0 {
            return Err(DataError::Format {
                file: name,
                detail: format!(
                    "length {} is not a multiple of {CIFAR_RECORD_LEN}",
                    bytes.len()
                ),
            }
            .into());
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
            let label = rec[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(DataError::Format {
                    file: name,
                    detail: format!("label {label} outside 0..{CIFAR_CLASSES}"),
                }
                .into());
            }
            labels.push(label);
            images.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    Dataset::new(images, labels, [3, 32, 32], CIFAR_CLASSES, split)
}

/// Class-conditional synthetic images: each class has a uniform random
/// template; samples add `N(0, sigma)` pixel noise and clamp to `[0, 1]`.
/// Samples are laid out class by class.
pub fn synth_dataset(
    num_classes: usize,
    samples_per_class: usize,
    shape: [usize; 3],
    sigma: f64,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs K >= 2, got {num_classes}"
        )));
    }
    let templates = synth_templates(num_classes, shape, seed);
    // sample noise stream differs per split so train and test are disjoint draws
    let stream = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let normal = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let per: usize = shape.iter().product();
    let mut images = Vec::with_capacity(num_classes * samples_per_class * per);
    let mut labels = Vec::with_capacity(num_classes * samples_per_class);
    for (k, t) in templates.iter().enumerate() {
        for _ in 0..samples_per_class {
            images.extend(t.iter().map(|&p| {
                if sigma > 0.0 {
                    (p + normal.sample(&mut rng)).clamp(0.0, 1.0)
                } else {
                    p
                }
            }));
            labels.push(k);
        }
    }
    Dataset::new(images, labels, shape, num_classes, split)
}

/// The per-class templates behind [`synth_dataset`].
pub fn synth_templates(num_classes: usize, shape: [usize; 3], seed: u64) -> Vec<Vec<f64>> {
    let per: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_classes)
        .map(|_| (0..per).map(|_| rng.random::<f64>()).collect())
        .collect()
}

/// Shuffled partition of `0..n` into batches; a pure function of
/// `(seed, epoch)`. The last short batch is kept.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// In-order partition, for evaluation.
pub fn sequential_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
