//! MNIST ingestion: IDX parsing, train/validation/test splits, global
//! normalization and seeded minibatching.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;
/// Size of the validation split carved from the end of the training files.
pub const VALIDATION_SIZE: usize = 10_000;
/// Environment variable naming the default MNIST directory.
pub const DATA_DIR_ENV: &str = "SERLU_MNIST_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
    Unsplit,
}

/// Global scalar normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// Images as a `samples × pixels` matrix with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Array2<f64>,
    pub labels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
    pub split: Split,
    pub norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(images: Array2<f64>, labels: Vec<u8>, rows: usize, cols: usize) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::Data(format!("{} images but {} labels", images.nrows(), labels.len())));
        }
        if images.ncols() != rows * cols {
            return Err(Error::Data(format!("image width {} does not match {rows}x{cols}", images.ncols())));
        }
        if let Some(bad) = labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!("label {} at index {bad} is out of range", labels[bad])));
        }
        Ok(Dataset {
            images,
            labels,
            rows,
            cols,
            split: Split::Unsplit,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.images.ncols()
    }

    /// Rows `range` as a new dataset with the given split tag.
    pub fn slice(&self, range: std::ops::Range<usize>, split: Split) -> Dataset {
        Dataset {
            images: self.images.slice(ndarray::s![range.clone(), ..]).to_owned(),
            labels: self.labels[range].to_vec(),
            rows: self.rows,
            cols: self.cols,
            split,
            norm: self.norm,
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        self.slice(0..n.min(self.len()), self.split)
    }

    /// Copy the selected rows into a contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> (Array2<f64>, Vec<u8>) {
        (self.images.select(Axis(0), indices), indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Subtract `stats.mean` and divide by `stats.std` in place.
    pub fn apply_norm(&mut self, stats: NormStats) {
        let inv = 1.0 / stats.std;
        self.images.mapv_inplace(|v| (v - stats.mean) * inv);
        self.norm = Some(stats);
    }
}

/// Mean and population standard deviation over every pixel of `ds`.
pub fn norm_stats(ds: &Dataset) -> Result<NormStats> {
    if ds.is_empty() {
        return Err(Error::Data("cannot compute statistics of an empty dataset".into()));
    }
    let n = ds.images.len() as f64;
    let mean = ds.images.iter().sum::<f64>() / n;
    let var = ds.images.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::Data(format!("training images have zero standard deviation (mean {mean})")));
    }
    Ok(NormStats { mean, std })
}

/// Train, validation and test splits.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Option<Dataset>,
}

impl Splits {
    /// Carve the last `validation` samples of `train_full` off as the validation split.
    pub fn from_train(train_full: Dataset, validation: usize, test: Option<Dataset>) -> Result<Self> {
        if validation >= train_full.len() {
            return Err(Error::Data(format!(
                "validation size {validation} leaves no training samples out of {}",
                train_full.len()
            )));
        }
        let cut = train_full.len() - validation;
        let train = train_full.slice(0..cut, Split::Train);
        let val = train_full.slice(cut..train_full.len(), Split::Validation);
        let test = test.map(|mut t| {
            t.split = Split::Test;
            t
        });
        Ok(Splits {
            train,
            validation: val,
            test,
        })
    }

    /// Normalize every split with statistics of the training split.
    pub fn normalize(mut self) -> Result<Self> {
        let stats = norm_stats(&self.train)?;
        self.train.apply_norm(stats);
        self.validation.apply_norm(stats);
        if let Some(t) = self.test.as_mut() {
            t.apply_norm(stats);
        }
        Ok(self)
    }
}

/// Normalize a set of splits; thin wrapper over [`Splits::normalize`].
pub fn normalize(splits: Splits) -> Result<Splits> {
    splits.normalize()
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(path, bytes.len(), "file truncated inside header"))
}

struct IdxImages {
    count: usize,
    rows: usize,
    cols: usize,
    pixels: Vec<u8>,
}

fn parse_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(parse_err(path, 0, format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(parse_err(path, bytes.len(), format!("file truncated: {count} images of {rows}x{cols} need {need} bytes")));
    }
    if bytes.len() > need {
        return Err(parse_err(path, need, format!("{} trailing bytes after image data", bytes.len() - need)));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(parse_err(path, 0, format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(parse_err(path, bytes.len(), format!("file truncated: {count} labels need {need} bytes")));
    }
    if bytes.len() > need {
        return Err(parse_err(path, need, format!("{} trailing bytes after label data", bytes.len() - need)));
    }
    let labels = bytes[8..].to_vec();
    if let Some(i) = labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
        return Err(parse_err(path, 8 + i, format!("label {} out of range", labels[i])));
    }
    Ok(labels)
}

/// Parse an IDX image/label file pair. Pixels are scaled to `[0, 1]` by `/255`.
/// Gzip-compressed files are detected by their magic bytes.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = parse_images(&read_maybe_gz(ip)?, ip)?;
    let labels = parse_labels(&read_maybe_gz(lp)?, lp)?;
    if images.count != labels.len() {
        return Err(parse_err(lp, 4, format!("{} labels for {} images", labels.len(), images.count)));
    }
    let width = images.rows * images.cols;
    let pixels: Vec<f64> = images.pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let matrix = Array2::from_shape_vec((images.count, width), pixels).expect("pixel count checked against header");
    Dataset::new(matrix, labels, images.rows, images.cols)
}

/// Write `ds` as an IDX pair; pixel values are mapped back to bytes by `round(255·v)`.
pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let mut img = Vec::with_capacity(16 + ds.images.len());
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(ds.rows as u32).to_be_bytes());
    img.extend_from_slice(&(ds.cols as u32).to_be_bytes());
    img.extend(ds.images.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    fs::File::create(images_path)?.write_all(&img)?;

    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend_from_slice(&ds.labels);
    fs::File::create(labels_path)?.write_all(&lab)?;
    Ok(())
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Data(format!("{stem}[.gz] not found in {}", dir.display())))
}

/// Default MNIST directory: `$SERLU_MNIST_DIR` or `data/mnist`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data/mnist"))
}

/// Load the standard four MNIST files from `dir`, split and normalize.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<Splits> {
    let dir = dir.as_ref();
    let train = load_idx(find_file(dir, "train-images-idx3-ubyte")?, find_file(dir, "train-labels-idx1-ubyte")?)?;
    let test = match (find_file(dir, "t10k-images-idx3-ubyte"), find_file(dir, "t10k-labels-idx1-ubyte")) {
        (Ok(i), Ok(l)) => Some(load_idx(i, l)?),
        _ => None,
    };
    Splits::from_train(train, VALIDATION_SIZE, test)?.normalize()
}

/// Shuffled index batches for one epoch; the permutation depends only on `(seed, epoch)`.
/// The last batch may be short.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}
