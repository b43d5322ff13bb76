//! Image datasets: CIFAR-10 binary batches, a synthetic generator, and the
//! `ADVS` container used for clean and attacked sets alike.
//!
//! `ADVS` layout (little endian): magic `ADVS`, version `u32`, provenance as
//! `u32` length + UTF-8, record count `u32`, image rank `u32` and extents
//! `u32` each, one `u32` label per record, then all pixel values as `f64`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::{put_f64s, put_u32, read, write_atomic, Cursor};
use crate::attacks::quantize;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_CLASSES: usize = 10;
pub const IMAGE_SHAPE: [usize; 3] = [3, 32, 32];

const MAGIC: &[u8; 4] = b"ADVS";
const VERSION: u32 = 1;

/// Provenance tag of clean data.
pub const CLEAN: &str = "clean";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetContainer {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// `clean` or the id of the attack that produced the images.
    pub provenance: String,
}

impl DatasetContainer {
    /// Checks equal counts, a single image shape and `[0, 1]` pixel values.
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, provenance: impl Into<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            if let Some(i) = images.iter().position(|x| x.shape() != first.shape()) {
                return Err(Error::shape("dataset", format!("image {i} differs in shape from image 0")));
            }
        }
        if let Some(i) = images.iter().position(|x| !x.within(0.0, 1.0)) {
            return Err(Error::InvalidArgument(format!("image {i} has values outside [0, 1]")));
        }
        Ok(DatasetContainer {
            images,
            labels,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Records at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> DatasetContainer {
        DatasetContainer {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// The first `n` records (all of them if there are fewer).
    pub fn head(&self, n: usize) -> DatasetContainer {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }
}

/// Decodes CIFAR-10 binary records: a label byte followed by the R, G and B
/// 32x32 planes, row-major, scaled by 1/255.
pub fn parse_cifar10(bytes: &[u8]) -> Result<DatasetContainer> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Format {
            what: "CIFAR-10 batch",
            detail: format!("size {} is not a multiple of {CIFAR_RECORD_BYTES}", bytes.len()),
        });
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD_BYTES);
    let mut labels = Vec::with_capacity(images.capacity());
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format {
                what: "CIFAR-10 batch",
                detail: format!("record {i} has label byte {label}"),
            });
        }
        labels.push(label);
        let data = record[1..].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Tensor::from_parts(IMAGE_SHAPE.to_vec(), data));
    }
    Ok(DatasetContainer {
        images,
        labels,
        provenance: CLEAN.into(),
    })
}

pub fn load_cifar10(path: &Path) -> Result<DatasetContainer> {
    parse_cifar10(&read(path)?)
}

/// The first `train_records` training records (read from `data_batch_1.bin`
/// onward) and the first `test_records` of `test_batch.bin`.
pub fn load_cifar10_split(dir: &Path, train_records: usize, test_records: usize) -> Result<(DatasetContainer, DatasetContainer)> {
    let mut train = DatasetContainer {
        images: Vec::new(),
        labels: Vec::new(),
        provenance: CLEAN.into(),
    };
    for batch in 1..=5 {
        if train.len() >= train_records {
            break;
        }
        let part = load_cifar10(&dir.join(format!("data_batch_{batch}.bin")))?;
        let need = train_records - train.len();
        let part = part.head(need);
        train.images.extend(part.images);
        train.labels.extend(part.labels);
    }
    if train.len() < train_records {
        return Err(Error::InvalidArgument(format!(
            "requested {train_records} training records, only {} available",
            train.len()
        )));
    }
    let test = load_cifar10(&dir.join("test_batch.bin"))?;
    if test.len() < test_records {
        return Err(Error::InvalidArgument(format!(
            "requested {test_records} test records, only {} available",
            test.len()
        )));
    }
    Ok((train, test.head(test_records)))
}

/// Noise standard deviation of the synthetic generator.
pub const SYNTHETIC_NOISE: f64 = 0.12;

/// Class-dependent blob images: each class has a mean pattern made of 8x8
/// blocks with per-channel levels in `[0.15, 0.85]`, and every record adds
/// independent Gaussian noise, then is clipped and quantized to the 8-bit
/// grid. Record `i` belongs to class `i % classes`.
///
/// Patterns come from ChaCha8 stream 0 of `seed`, noise from stream 1, so a
/// larger `per_class` only appends records.
pub fn generate_synthetic(classes: usize, per_class: usize, seed: u64) -> Result<DatasetContainer> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("synthetic data needs at least 2 classes, got {classes}")));
    }
    let [c, h, w] = IMAGE_SHAPE;
    const BLOCK: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let level = Uniform::new_inclusive(0.15, 0.85);
    let patterns: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let blocks: Vec<f64> = (0..c * (h / BLOCK) * (w / BLOCK)).map(|_| level.sample(&mut rng)).collect();
            let mut img = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        img[(ch * h + y) * w + x] = blocks[(ch * (h / BLOCK) + y / BLOCK) * (w / BLOCK) + x / BLOCK];
                    }
                }
            }
            img
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let noise = Normal::new(0.0, SYNTHETIC_NOISE).expect("valid normal");
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for i in 0..classes * per_class {
        let label = i % classes;
        let data = patterns[label]
            .iter()
            .map(|m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0))
            .collect();
        images.push(quantize(&Tensor::from_parts(IMAGE_SHAPE.to_vec(), data))?);
        labels.push(label);
    }
    Ok(DatasetContainer {
        images,
        labels,
        provenance: CLEAN.into(),
    })
}

pub fn dataset_to_bytes(set: &DatasetContainer) -> Result<Vec<u8>> {
    let shape = set.images.first().map_or(IMAGE_SHAPE.to_vec(), |x| x.shape().to_vec());
    let per: usize = shape.iter().product();
    let mut out = Vec::with_capacity(64 + set.len() * (4 + per * 8));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, set.provenance.len())?;
    out.extend_from_slice(set.provenance.as_bytes());
    put_u32(&mut out, set.len())?;
    put_u32(&mut out, shape.len())?;
    for &e in &shape {
        put_u32(&mut out, e)?;
    }
    for &l in &set.labels {
        put_u32(&mut out, l)?;
    }
    for x in &set.images {
        put_f64s(&mut out, x.data());
    }
    Ok(out)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<DatasetContainer> {
    let bad = |detail: String| Error::Format {
        what: "dataset container",
        detail,
    };
    let mut cur = Cursor::new(bytes, "dataset container");
    if cur.take(4)? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = cur.u32()? as usize;
    let provenance = String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| bad("provenance is not UTF-8".into()))?;
    let count = cur.u32()? as usize;
    let rank = cur.u32()? as usize;
    let shape: Vec<usize> = (0..rank).map(|_| cur.u32().map(|e| e as usize)).collect::<Result<_>>()?;
    let labels: Vec<usize> = (0..count).map(|_| cur.u32().map(|l| l as usize)).collect::<Result<_>>()?;
    let per: usize = shape.iter().product();
    let images = (0..count)
        .map(|_| Tensor::new(shape.clone(), cur.f64s(per)?))
        .collect::<Result<Vec<_>>>()?;
    cur.finish()?;
    DatasetContainer::new(images, labels, provenance)
}

pub fn save_dataset(set: &DatasetContainer, path: &Path) -> Result<()> {
    write_atomic(path, &dataset_to_bytes(set)?)
}

pub fn load_dataset(path: &Path) -> Result<DatasetContainer> {
    dataset_from_bytes(&read(path)?)
}

/// Sidecar recording which records of an attacked set fooled the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuccessMask {
    pub attack: String,
    pub success: Vec<bool>,
    pub success_rate: f64,
}

impl SuccessMask {
    pub fn new(attack: impl Into<String>, success: Vec<bool>) -> Self {
        let rate = if success.is_empty() {
            0.0
        } else {
            success.iter().filter(|&&s| s).count() as f64 / success.len() as f64
        };
        SuccessMask {
            attack: attack.into(),
            success,
            success_rate: rate,
        }
    }
}

pub fn save_mask(mask: &SuccessMask, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(mask)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_mask(path: &Path) -> Result<SuccessMask> {
    Ok(serde_json::from_slice(&read(path)?)?)
}
