//! MNIST IDX and CIFAR-10 binary loaders, subsetting and deterministic batching.
//!
//! Raw bytes map to `[-1, 1]` by `p / 127.5 - 1`; `round((x + 1) * 127.5)`
//! recovers the byte.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[C,H,W]` in `[-1, 1]`.
    pub pixels: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub classes: usize,
    pub image_shape: [usize; 3],
    pub items: Vec<LabeledImage>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, classes: usize, items: Vec<LabeledImage>) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))?;
        let s = first.pixels.shape();
        if s.len() != 3 {
            return Err(Error::shape("dataset", format!("images must be [C,H,W], got {s:?}")));
        }
        let image_shape = [s[0], s[1], s[2]];
        for (i, it) in items.iter().enumerate() {
            if it.pixels.shape() != s {
                return Err(Error::shape(
                    "dataset",
                    format!("image {i} is {:?}, expected {s:?}", it.pixels.shape()),
                ));
            }
            if it.label >= classes {
                return Err(Error::InvalidArgument(format!(
                    "image {i} has label {} but the dataset has {classes} classes",
                    it.label
                )));
            }
        }
        Ok(Dataset {
            name: name.into(),
            classes,
            image_shape,
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `n` items drawn without replacement, as a function of `seed` only.
    /// `n >= len` keeps everything in the original order.
    pub fn subset(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.items.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.items.len()).collect();
        Rng::derived(seed, &[0x5B5E7]).shuffle(&mut idx);
        idx.truncate(n);
        idx.sort_unstable();
        Dataset {
            name: self.name.clone(),
            classes: self.classes,
            image_shape: self.image_shape,
            items: idx.into_iter().map(|i| self.items[i].clone()).collect(),
        }
    }

    /// First `n` items.
    pub fn head(&self, n: usize) -> Dataset {
        Dataset {
            items: self.items.iter().take(n).cloned().collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

/// Where a dataset lives and how much of it to use.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub name: String,
    pub kind: DatasetKind,
    pub classes: usize,
    pub image_shape: [usize; 3],
    /// MNIST: `[images, labels]`; CIFAR-10: any number of batch files.
    pub train_paths: Vec<PathBuf>,
    pub test_paths: Vec<PathBuf>,
    /// 0 keeps everything.
    pub train_subset: usize,
    pub test_subset: usize,
    pub subset_seed: u64,
}

impl DatasetSpec {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let read = |paths: &[PathBuf]| -> Result<Vec<LabeledImage>> {
            match self.kind {
                DatasetKind::Mnist => {
                    if paths.len() != 2 {
                        return Err(Error::InvalidArgument(
                            "MNIST needs an images path and a labels path".into(),
                        ));
                    }
                    load_idx(&paths[0], &paths[1])
                }
                DatasetKind::Cifar10 => load_cifar10(paths),
            }
        };
        let train = Dataset::new(&self.name, self.classes, read(&self.train_paths)?)?;
        let test = Dataset::new(&self.name, self.classes, read(&self.test_paths)?)?;
        for d in [&train, &test] {
            if d.image_shape != self.image_shape {
                return Err(Error::shape(
                    "dataset",
                    format!(
                        "{} images are {:?}, expected {:?}",
                        self.name, d.image_shape, self.image_shape
                    ),
                ));
            }
        }
        let pick = |d: Dataset, n: usize, stream: u64| {
            if n == 0 {
                d
            } else {
                d.subset(n, self.subset_seed.wrapping_add(stream))
            }
        };
        Ok((
            pick(train, self.train_subset, 0),
            pick(test, self.test_subset, 1),
        ))
    }
}

pub fn normalize_pixel(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

pub fn denormalize_pixel(x: f32) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads an IDX3 image file and its IDX1 label file.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = read(ip)?;
    let labels = read(lp)?;
    if images.len() < 16 {
        return Err(format_err(ip, "truncated header"));
    }
    if labels.len() < 8 {
        return Err(format_err(lp, "truncated header"));
    }
    let magic = be_u32(&images, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(ip, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let magic = be_u32(&labels, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(lp, format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let count = be_u32(&images, 4) as usize;
    let (rows, cols) = (be_u32(&images, 8) as usize, be_u32(&images, 12) as usize);
    let label_count = be_u32(&labels, 4) as usize;
    if count != label_count {
        return Err(format_err(
            lp,
            format!("{label_count} labels for {count} images in {}", ip.display()),
        ));
    }
    let plane = rows * cols;
    if images.len() != 16 + count * plane {
        return Err(format_err(
            ip,
            format!("expected {} bytes for {count} {rows}x{cols} images, found {}", 16 + count * plane, images.len()),
        ));
    }
    if labels.len() != 8 + count {
        return Err(format_err(lp, format!("expected {} bytes, found {}", 8 + count, labels.len())));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let raw = &images[16 + i * plane..16 + (i + 1) * plane];
        let pixels = Tensor::new(&[1, rows, cols], raw.iter().map(|&p| normalize_pixel(p)).collect())?;
        out.push(LabeledImage {
            pixels,
            label: labels[8 + i] as usize,
        });
    }
    Ok(out)
}

/// Reads CIFAR-10 binary batches: 3073-byte records of one label byte then
/// 1024 red, 1024 green and 1024 blue bytes, each plane row-major 32x32.
pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P]) -> Result<Vec<LabeledImage>> {
    let mut out = Vec::new();
    for p in batch_paths {
        let path = p.as_ref();
        let bytes = read(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(format_err(
                path,
                format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for rec in bytes.chunks(CIFAR_RECORD) {
            let pixels = Tensor::new(&[3, 32, 32], rec[1..].iter().map(|&p| normalize_pixel(p)).collect())?;
            out.push(LabeledImage {
                pixels,
                label: rec[0] as usize,
            });
        }
    }
    Ok(out)
}

/// Writes an IDX3/IDX1 pair for `images` (`rows x cols` bytes each).
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    images: &[Vec<u8>],
    labels: &[u8],
) -> Result<()> {
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for im in images {
        img.extend_from_slice(im);
    }
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    let ip = images_path.as_ref();
    let lp = labels_path.as_ref();
    fs::write(ip, img).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, lab).map_err(|e| Error::io(lp, e))
}

/// One mini-batch: images `[N,C,H,W]`, labels, and dataset indices.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Splits the dataset into batches. With `shuffle_seed` the order is a
/// permutation determined by `(seed, epoch)`; without it, dataset order.
/// The final partial batch is kept.
pub fn batch_iter(dataset: &Dataset, batch_size: usize, shuffle_seed: Option<u64>, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot batch an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = shuffle_seed {
        Rng::derived(seed, &[0xBA7C4, epoch]).shuffle(&mut order);
    }
    order
        .chunks(batch_size)
        .map(|idx| {
            let imgs: Vec<Tensor> = idx.iter().map(|&i| dataset.items[i].pixels.clone()).collect();
            Ok(Batch {
                images: Tensor::stack(&imgs)?,
                labels: idx.iter().map(|&i| dataset.items[i].label).collect(),
                indices: idx.to_vec(),
            })
        })
        .collect()
}
