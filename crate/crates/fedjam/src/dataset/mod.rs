//! Persistent dataset container and stratified train/test splitting.
//!
//! Datasets are stored in the packed little-endian FJAM format:
//! magic `FJAM`, version `u32`, count `u32`, height `u16`, width `u16`,
//! num_classes `u8`, then `count` records of (label `u8`, `height*width`
//! pixel bytes).

pub mod partition;

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::siggen::Spectrogram;

pub use partition::{partition_dirichlet, partition_iid, PartitionMap, PartitionMode};

const FJAM_MAGIC: &[u8; 4] = b"FJAM";
const FJAM_VERSION: u32 = 1;
const FJAM_HEADER_LEN: u64 = 17;

/// In-memory image dataset: uniform 8-bit grayscale records with labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    height: usize,
    width: usize,
    num_classes: u8,
    labels: Vec<u8>,
    pixels: Vec<u8>,
}

impl Dataset {
    pub fn new(height: usize, width: usize, num_classes: u8) -> Result<Self> {
        if height == 0 || width == 0 || height > u16::MAX as usize || width > u16::MAX as usize {
            return Err(Error::config(format!(
                "dataset dims {height}x{width} out of range 1..=65535"
            )));
        }
        if num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        Ok(Dataset {
            height,
            width,
            num_classes,
            labels: Vec::new(),
            pixels: Vec::new(),
        })
    }

    pub fn from_spectrograms(records: &[Spectrogram], num_classes: u8) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::input("cannot build a dataset from zero records"))?;
        let mut ds = Dataset::new(first.height, first.width, num_classes)?;
        for (i, rec) in records.iter().enumerate() {
            if rec.height != ds.height || rec.width != ds.width {
                return Err(Error::input(format!(
                    "record {i} dims {}x{} differ from {}x{}",
                    rec.height, rec.width, ds.height, ds.width
                )));
            }
            ds.push(rec.label.code(), &rec.pixels)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, label: u8, pixels: &[u8]) -> Result<()> {
        if label >= self.num_classes {
            return Err(Error::input(format!(
                "label {label} out of range for {} classes",
                self.num_classes
            )));
        }
        if pixels.len() != self.pixel_dim() {
            return Err(Error::input(format!(
                "record has {} pixels, expected {}",
                pixels.len(),
                self.pixel_dim()
            )));
        }
        self.labels.push(label);
        self.pixels.extend_from_slice(pixels);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn pixel_dim(&self) -> usize {
        self.height * self.width
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let d = self.pixel_dim();
        &self.pixels[i * d..(i + 1) * d]
    }

    /// Per-class record counts, indexed by label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes as usize];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(
            FJAM_HEADER_LEN as usize + self.len() * (1 + self.pixel_dim()),
        );
        bytes.extend_from_slice(FJAM_MAGIC);
        bytes.extend_from_slice(&FJAM_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.height as u16).to_le_bytes());
        bytes.extend_from_slice(&(self.width as u16).to_le_bytes());
        bytes.push(self.num_classes);
        let d = self.pixel_dim();
        for i in 0..self.len() {
            bytes.push(self.labels[i]);
            bytes.extend_from_slice(&self.pixels[i * d..(i + 1) * d]);
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FJAM_HEADER_LEN as usize {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated header: {} of {FJAM_HEADER_LEN} bytes", bytes.len()),
            ));
        }
        if &bytes[0..4] != FJAM_MAGIC {
            return Err(Error::format(0, "bad magic, expected FJAM"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FJAM_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported version {version}, expected {FJAM_VERSION}"),
            ));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let height = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
        let width = u16::from_le_bytes(bytes[14..16].try_into().unwrap()) as usize;
        let num_classes = bytes[16];
        if height == 0 || width == 0 {
            return Err(Error::format(12, format!("zero image dims {height}x{width}")));
        }
        if num_classes == 0 {
            return Err(Error::format(16, "num_classes is zero"));
        }
        let dim = height * width;
        let expected = FJAM_HEADER_LEN + count as u64 * (1 + dim as u64);
        if (bytes.len() as u64) != expected {
            return Err(Error::format(
                expected.min(bytes.len() as u64),
                format!("file is {} bytes, expected exactly {expected}", bytes.len()),
            ));
        }
        let mut ds = Dataset::new(height, width, num_classes)?;
        ds.labels.reserve(count);
        ds.pixels.reserve(count * dim);
        let mut offset = FJAM_HEADER_LEN as usize;
        for i in 0..count {
            let label = bytes[offset];
            if label >= num_classes {
                return Err(Error::format(
                    offset as u64,
                    format!("record {i}: label {label} >= num_classes {num_classes}"),
                ));
            }
            ds.labels.push(label);
            ds.pixels.extend_from_slice(&bytes[offset + 1..offset + 1 + dim]);
            offset += 1 + dim;
        }
        Ok(ds)
    }
}

impl crate::nn::Examples for Dataset {
    fn len(&self) -> usize {
        self.labels.len()
    }
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    fn pixels(&self, i: usize) -> &[u8] {
        self.image(i)
    }
    fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }
}

/// A view of selected records, e.g. one client's shard or the test split.
#[derive(Debug, Clone, Copy)]
pub struct Subset<'a> {
    data: &'a Dataset,
    idx: &'a [usize],
}

impl<'a> Subset<'a> {
    pub fn new(data: &'a Dataset, idx: &'a [usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= data.len()) {
            return Err(Error::input(format!(
                "subset index {bad} out of range for {} records",
                data.len()
            )));
        }
        Ok(Subset { data, idx })
    }

    pub fn indices(&self) -> &[usize] {
        self.idx
    }
}

impl crate::nn::Examples for Subset<'_> {
    fn len(&self) -> usize {
        self.idx.len()
    }
    fn dims(&self) -> (usize, usize) {
        (self.data.height, self.data.width)
    }
    fn pixels(&self, i: usize) -> &[u8] {
        self.data.image(self.idx[i])
    }
    fn label(&self, i: usize) -> u8 {
        self.data.labels[self.idx[i]]
    }
}

/// Stratified train/test split over `labels`.
///
/// Per class: shuffle that class's indices with a class-derived sub-seed and
/// send `round(count * test_fraction)` of them (at least 1, at most count-1)
/// to the test side. Returned index lists are sorted.
pub fn split_train_test(
    labels: &[u8],
    num_classes: u8,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes as usize];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::input(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        by_class[l as usize].push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::input(format!(
                "class {class} has {} record(s); need at least 2 to split",
                idx.len()
            )));
        }
        let n_test = ((idx.len() as f64 * test_fraction).round() as usize)
            .max(1)
            .min(idx.len() - 1);
        let mut rng = rng_from_seed(derive_seed(seed, &[class as u64]));
        idx.shuffle(&mut rng);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
