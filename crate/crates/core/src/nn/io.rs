//! Binary model files.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "FSNN" version layer_count
//! per layer: kind_tag name_len name_bytes attr_count attr* tensor_count
//!            (rank dim* f32_payload)*
//! trailer:   name_len name_bytes input_rank dim* classes hardening_tag
//!            meta_count (key_len key val_len val)*
//! ```
//!
//! FP32 payloads are stored as raw bits, so a round trip is bit-exact.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::layer::Conv2d;
use super::{Layer, LayerKind, Model, NnError, Tensor};
use crate::hardening::HardeningKind;

pub const MAGIC: &[u8; 4] = b"FSNN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("not a model file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported model file version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("model file truncated at byte {0}")]
    Truncated(usize),
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error("invalid model: {0}")]
    Invalid(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const TAGS: [&str; 11] = [
    "conv2d",
    "linear",
    "batchnorm2d_folded",
    "relu",
    "relu6",
    "clipped_relu",
    "range_restrict",
    "maxpool2d",
    "avgpool2d",
    "flatten",
    "residual_add",
];

fn kind_tag(kind: &LayerKind) -> u32 {
    TAGS.iter().position(|t| *t == kind.tag()).expect("every kind has a tag") as u32
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for v in t.data() {
            self.u32(v.to_bits());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelFileError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ModelFileError::Truncated(self.bytes.len())),
        }
    }
    fn u32(&mut self) -> Result<u32, ModelFileError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn len(&mut self, what: &str) -> Result<usize, ModelFileError> {
        let n = self.u32()? as usize;
        // every counted item occupies at least one byte
        if n > self.bytes.len() - self.pos.min(self.bytes.len()) {
            return Err(if n > 1 << 28 {
                ModelFileError::Corrupt(format!("implausible {what} {n}"))
            } else {
                ModelFileError::Truncated(self.bytes.len())
            });
        }
        Ok(n)
    }
    fn str(&mut self) -> Result<String, ModelFileError> {
        let n = self.len("string length")?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| ModelFileError::Corrupt("non-UTF-8 string".into()))
    }
    fn dims(&mut self) -> Result<Vec<usize>, ModelFileError> {
        let rank = self.len("rank")?;
        (0..rank).map(|_| self.u32().map(|d| d as usize)).collect()
    }
    fn tensor(&mut self) -> Result<Tensor, ModelFileError> {
        let shape = self.dims()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| ModelFileError::Corrupt("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_bits(u32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        Ok(Tensor::new(shape, data)?)
    }
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(model.layers().len() as u32);
    for layer in model.layers() {
        w.u32(kind_tag(&layer.kind));
        w.str(&layer.name);
        let attrs: Vec<u32> = match &layer.kind {
            LayerKind::Conv2d(c) => vec![c.stride as u32, c.padding as u32, c.groups as u32],
            LayerKind::ClippedRelu { tau } => vec![tau.to_bits()],
            LayerKind::RangeRestrict { lo, hi } => vec![lo.to_bits(), hi.to_bits()],
            LayerKind::MaxPool2d { kernel, stride } | LayerKind::AvgPool2d { kernel, stride } => {
                vec![*kernel as u32, *stride as u32]
            }
            LayerKind::ResidualAdd { src } => vec![*src as u32],
            _ => Vec::new(),
        };
        w.u32(attrs.len() as u32);
        attrs.into_iter().for_each(|a| w.u32(a));
        let params = layer.kind.params();
        w.u32(params.len() as u32);
        params.into_iter().for_each(|t| w.tensor(t));
    }
    w.str(&model.name);
    w.u32(model.input_shape().len() as u32);
    model.input_shape().iter().for_each(|&d| w.u32(d as u32));
    w.u32(model.classes() as u32);
    w.u32(model.hardening.code());
    w.u32(model.metadata.len() as u32);
    for (k, v) in &model.metadata {
        w.str(k);
        w.str(v);
    }
    w.0
}

pub fn decode_model(bytes: &[u8]) -> Result<Model, ModelFileError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| {
        let mut m = [0u8; 4];
        m[..bytes.len()].copy_from_slice(bytes);
        ModelFileError::BadMagic(m)
    })?;
    if magic != MAGIC {
        return Err(ModelFileError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelFileError::Version { found: version });
    }
    let n_layers = r.len("layer count")?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let tag = r.u32()? as usize;
        let name = r.str()?;
        let n_attrs = r.len("attribute count")?;
        let attrs: Vec<u32> = (0..n_attrs).map(|_| r.u32()).collect::<Result<_, _>>()?;
        let n_tensors = r.len("tensor count")?;
        let mut tensors: Vec<Tensor> = (0..n_tensors).map(|_| r.tensor()).collect::<Result<_, _>>()?;
        let kind_name = *TAGS
            .get(tag)
            .ok_or_else(|| ModelFileError::Corrupt(format!("unknown layer tag {tag}")))?;
        let want = |a: usize, t: usize| -> Result<(), ModelFileError> {
            if attrs.len() != a || tensors.len() != t {
                return Err(ModelFileError::Corrupt(format!(
                    "layer '{name}' ({kind_name}): expected {a} attrs / {t} tensors"
                )));
            }
            Ok(())
        };
        let kind = match kind_name {
            "conv2d" => {
                want(3, 2)?;
                let bias = tensors.pop().expect("checked");
                let weight = tensors.pop().expect("checked");
                LayerKind::Conv2d(Conv2d {
                    weight,
                    bias,
                    stride: attrs[0] as usize,
                    padding: attrs[1] as usize,
                    groups: attrs[2] as usize,
                })
            }
            "linear" => {
                want(0, 2)?;
                let bias = tensors.pop().expect("checked");
                LayerKind::Linear { weight: tensors.pop().expect("checked"), bias }
            }
            "batchnorm2d_folded" => {
                want(0, 2)?;
                let shift = tensors.pop().expect("checked");
                LayerKind::BatchNorm2dFolded { scale: tensors.pop().expect("checked"), shift }
            }
            "relu" => {
                want(0, 0)?;
                LayerKind::Relu
            }
            "relu6" => {
                want(0, 0)?;
                LayerKind::Relu6
            }
            "clipped_relu" => {
                want(1, 0)?;
                LayerKind::ClippedRelu { tau: f32::from_bits(attrs[0]) }
            }
            "range_restrict" => {
                want(2, 0)?;
                LayerKind::RangeRestrict { lo: f32::from_bits(attrs[0]), hi: f32::from_bits(attrs[1]) }
            }
            "maxpool2d" => {
                want(2, 0)?;
                LayerKind::MaxPool2d { kernel: attrs[0] as usize, stride: attrs[1] as usize }
            }
            "avgpool2d" => {
                want(2, 0)?;
                LayerKind::AvgPool2d { kernel: attrs[0] as usize, stride: attrs[1] as usize }
            }
            "flatten" => {
                want(0, 0)?;
                LayerKind::Flatten
            }
            _ => {
                want(1, 0)?;
                LayerKind::ResidualAdd { src: attrs[0] as usize }
            }
        };
        layers.push(Layer { name, kind });
    }
    let name = r.str()?;
    let input_shape = r.dims()?;
    let classes = r.u32()? as usize;
    let hardening = HardeningKind::from_code(r.u32()?)
        .ok_or_else(|| ModelFileError::Corrupt("unknown hardening tag".into()))?;
    let n_meta = r.len("metadata count")?;
    let mut model = Model::new(name, input_shape, classes, layers)?;
    model.hardening = hardening;
    for _ in 0..n_meta {
        let k = r.str()?;
        let v = r.str()?;
        model.metadata.insert(k, v);
    }
    if r.pos != bytes.len() {
        return Err(ModelFileError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<(), ModelFileError> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model, ModelFileError> {
    decode_model(&fs::read(path)?)
}
