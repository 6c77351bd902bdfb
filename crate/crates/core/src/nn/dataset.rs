use std::fs;
use std::path::Path;

use super::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Calibration,
}

/// Images `[N, C, H, W]` (or `[N, F]`) with class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split) -> Result<Self, NnError> {
        if images.batch_len() != labels.len() {
            return Err(NnError::Dataset(format!(
                "{} images but {} labels",
                images.batch_len(),
                labels.len()
            )));
        }
        Ok(Self { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// First `n` samples (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images.slice_batch(0, n),
            labels: self.labels[..n].to_vec(),
            split: self.split,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn check_classes(&self, classes: usize) -> Result<(), NnError> {
        match self.labels.iter().find(|&&l| l >= classes) {
            Some(l) => Err(NnError::Dataset(format!("label {l} >= class count {classes}"))),
            None => Ok(()),
        }
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, NnError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| NnError::Dataset(format!("{what}: truncated IDX header")))
}

/// Parse an IDX image file (magic 0x803) into `[N, 1, rows, cols]` scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor, NnError> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(NnError::Dataset(format!(
            "images: bad IDX magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let payload = &bytes[16..];
    if payload.len() != n * rows * cols {
        return Err(NnError::Dataset(format!(
            "images: header declares {n}x{rows}x{cols} pixels, file has {}",
            payload.len()
        )));
    }
    let data = payload.iter().map(|&p| p as f32 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

/// Parse an IDX label file (magic 0x801).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, NnError> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(NnError::Dataset(format!(
            "labels: bad IDX magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(NnError::Dataset(format!(
            "labels: header declares {n} labels, file has {}",
            payload.len()
        )));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

pub fn load_mnist_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    split: Split,
) -> Result<Dataset, NnError> {
    let img = parse_idx_images(&fs::read(images.as_ref())?)?;
    let lab = parse_idx_labels(&fs::read(labels.as_ref())?)?;
    if img.batch_len() != lab.len() {
        return Err(NnError::Dataset(format!(
            "image count {} does not match label count {}",
            img.batch_len(),
            lab.len()
        )));
    }
    Dataset::new(img, lab, split)
}

/// Standard file names inside an MNIST directory.
pub fn load_mnist_dir(dir: impl AsRef<Path>, split: Split) -> Result<Dataset, NnError> {
    let dir = dir.as_ref();
    let prefix = match split {
        Split::Test => "t10k",
        Split::Train | Split::Calibration => "train",
    };
    load_mnist_idx(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}

/// CSV fallback: each line is `label,p0,p1,...` with raw 0..255 pixel values.
pub fn parse_csv(text: &str, sample_shape: &[usize], split: Split) -> Result<Dataset, NnError> {
    let per: usize = sample_shape.iter().product();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label = fields
            .next()
            .and_then(|f| f.trim().parse::<usize>().ok())
            .ok_or_else(|| NnError::Dataset(format!("csv line {}: bad label", ln + 1)))?;
        let before = data.len();
        for f in fields {
            let v: f32 = f
                .trim()
                .parse()
                .map_err(|_| NnError::Dataset(format!("csv line {}: bad pixel '{f}'", ln + 1)))?;
            data.push(v / 255.0);
        }
        if data.len() - before != per {
            return Err(NnError::Dataset(format!(
                "csv line {}: expected {per} pixels, got {}",
                ln + 1,
                data.len() - before
            )));
        }
        labels.push(label);
    }
    let mut shape = vec![labels.len()];
    shape.extend_from_slice(sample_shape);
    Dataset::new(Tensor::new(shape, data)?, labels, split)
}

pub fn load_csv(path: impl AsRef<Path>, sample_shape: &[usize], split: Split) -> Result<Dataset, NnError> {
    parse_csv(&fs::read_to_string(path)?, sample_shape, split)
}
