//! On-disk model and dataset containers. The byte layout is documented in
//! `docs/formats.md`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::model::{ConvLayer, DenseLayer, Layer, QuantParams, QuantizedModel, QuantizedTensor};

pub const MODEL_MAGIC: &[u8; 8] = b"AXCVMODL";
pub const IMAGES_MAGIC: &[u8; 8] = b"AXCVIMGS";
pub const LABELS_MAGIC: &[u8; 8] = b"AXCVLBLS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("truncated input at offset {offset}: needed {needed} bytes for {what}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
        what: &'static str,
    },
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: Vec<u8>, expected: &'static [u8] },
    #[error("unsupported format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("checksum mismatch: manifest says {expected}, blobs hash to {actual}")]
    Checksum { expected: String, actual: String },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("invalid model: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, FormatError>;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available,
                what,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, expected: &'static [u8; 8]) -> Result<()> {
        let found = self.take(8, "magic")?;
        if found != expected {
            return Err(FormatError::BadMagic {
                found: found.to_vec(),
                expected,
            });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let found = self.u32("format version")?;
        if found != FORMAT_VERSION {
            return Err(FormatError::Version {
                found,
                supported: FORMAT_VERSION,
            });
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| FormatError::Io {
        path: path.to_owned(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlobType {
    U8,
    I32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobRef {
    pub offset: usize,
    pub length: usize,
    pub dtype: BlobType,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRef {
    pub blob: usize,
    pub scale: f64,
    pub zero_point: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputSpec {
    pub shape: [usize; 3],
    pub scale: f64,
    pub zero_point: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv2d {
        name: String,
        kernel: [usize; 2],
        in_channels: usize,
        out_channels: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        weights: TensorRef,
        bias: usize,
        output: Option<QuantParams>,
    },
    Dense {
        name: String,
        in_features: usize,
        out_features: usize,
        weights: TensorRef,
        bias: usize,
        output: Option<QuantParams>,
    },
    Relu,
    Maxpool {
        size: usize,
        stride: usize,
    },
    Avgpool {
        size: usize,
        stride: usize,
    },
    Flatten,
    Argmax,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub name: String,
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
    pub blobs: Vec<BlobRef>,
    /// Lower-case hex SHA-256 of the whole blob section.
    pub checksum_sha256: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    parse_model(&read_file(path.as_ref())?)
}

pub fn parse_model(bytes: &[u8]) -> Result<QuantizedModel> {
    let mut r = Reader::new(bytes);
    r.magic(MODEL_MAGIC)?;
    r.version()?;
    let len = r.u32("manifest length")? as usize;
    let manifest_bytes = r.take(len, "manifest")?;
    let manifest: Manifest =
        serde_json::from_slice(manifest_bytes).map_err(|e| FormatError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(FormatError::Version {
            found: manifest.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let blob_base = r.pos;
    let blobs = &bytes[blob_base..];
    for (i, b) in manifest.blobs.iter().enumerate() {
        let end = b.offset.checked_add(b.length).unwrap_or(usize::MAX);
        if end > blobs.len() {
            return Err(FormatError::Truncated {
                offset: blob_base + b.offset.min(blobs.len()),
                needed: b.length,
                available: blobs.len().saturating_sub(b.offset),
                what: if i == 0 { "first blob" } else { "blob" },
            });
        }
    }
    let actual = sha256_hex(blobs);
    if !actual.eq_ignore_ascii_case(&manifest.checksum_sha256) {
        return Err(FormatError::Checksum {
            expected: manifest.checksum_sha256.clone(),
            actual,
        });
    }
    build_model(&manifest, blobs)
}

fn blob<'a>(manifest: &Manifest, blobs: &'a [u8], ix: usize, dtype: BlobType) -> Result<&'a [u8]> {
    let b = manifest
        .blobs
        .get(ix)
        .ok_or_else(|| FormatError::Invalid(format!("blob index {ix} out of range")))?;
    if b.dtype != dtype {
        return Err(FormatError::Invalid(format!("blob {ix} is {:?}, expected {dtype:?}", b.dtype)));
    }
    Ok(&blobs[b.offset..b.offset + b.length])
}

fn i32_blob(manifest: &Manifest, blobs: &[u8], ix: usize) -> Result<Vec<i32>> {
    let raw = blob(manifest, blobs, ix, BlobType::I32)?;
    if raw.len() % 4 != 0 {
        return Err(FormatError::Invalid(format!("i32 blob {ix} has {} bytes", raw.len())));
    }
    Ok(raw
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

fn tensor(manifest: &Manifest, blobs: &[u8], t: &TensorRef, shape: Vec<usize>) -> Result<QuantizedTensor> {
    let codes = blob(manifest, blobs, t.blob, BlobType::U8)?.to_vec();
    let quant = QuantParams {
        scale: t.scale,
        zero_point: t.zero_point,
    };
    QuantizedTensor::new(shape, codes, quant).map_err(|e| FormatError::Invalid(e.to_string()))
}

fn build_model(manifest: &Manifest, blobs: &[u8]) -> Result<QuantizedModel> {
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for spec in &manifest.layers {
        let layer = match spec {
            LayerSpec::Conv2d {
                name,
                kernel,
                in_channels,
                out_channels,
                stride,
                padding,
                weights,
                bias,
                output,
            } => Layer::Conv2d(ConvLayer {
                name: name.clone(),
                kernel: *kernel,
                in_channels: *in_channels,
                out_channels: *out_channels,
                stride: *stride,
                padding: *padding,
                weights: tensor(
                    manifest,
                    blobs,
                    weights,
                    vec![*out_channels, kernel[0], kernel[1], *in_channels],
                )?,
                bias: i32_blob(manifest, blobs, *bias)?,
                output: *output,
            }),
            LayerSpec::Dense {
                name,
                in_features,
                out_features,
                weights,
                bias,
                output,
            } => Layer::Dense(DenseLayer {
                name: name.clone(),
                in_features: *in_features,
                out_features: *out_features,
                weights: tensor(manifest, blobs, weights, vec![*out_features, *in_features])?,
                bias: i32_blob(manifest, blobs, *bias)?,
                output: *output,
            }),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Maxpool { size, stride } => Layer::MaxPool {
                size: *size,
                stride: *stride,
            },
            LayerSpec::Avgpool { size, stride } => Layer::AvgPool {
                size: *size,
                stride: *stride,
            },
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Argmax => Layer::Argmax,
        };
        layers.push(layer);
    }
    QuantizedModel::new(
        manifest.name.clone(),
        manifest.input.shape,
        QuantParams {
            scale: manifest.input.scale,
            zero_point: manifest.input.zero_point,
        },
        layers,
        manifest.metadata.clone(),
    )
    .map_err(|e| FormatError::Invalid(e.to_string()))
}

/// Serialize a model. Blobs are laid out in layer order, weights before bias.
pub fn encode_model(model: &QuantizedModel) -> Vec<u8> {
    let mut blob_bytes = Vec::new();
    let mut blobs = Vec::new();
    let mut push = |bytes: &[u8], dtype: BlobType| -> usize {
        blobs.push(BlobRef {
            offset: blob_bytes.len(),
            length: bytes.len(),
            dtype,
        });
        blob_bytes.extend_from_slice(bytes);
        blobs.len() - 1
    };
    let i32_bytes = |v: &[i32]| -> Vec<u8> { v.iter().flat_map(|x| x.to_le_bytes()).collect() };
    let mut layers = Vec::new();
    for layer in &model.layers {
        let spec = match layer {
            Layer::Conv2d(c) => LayerSpec::Conv2d {
                name: c.name.clone(),
                kernel: c.kernel,
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                stride: c.stride,
                padding: c.padding,
                weights: TensorRef {
                    blob: push(&c.weights.codes, BlobType::U8),
                    scale: c.weights.quant.scale,
                    zero_point: c.weights.quant.zero_point,
                },
                bias: push(&i32_bytes(&c.bias), BlobType::I32),
                output: c.output,
            },
            Layer::Dense(d) => LayerSpec::Dense {
                name: d.name.clone(),
                in_features: d.in_features,
                out_features: d.out_features,
                weights: TensorRef {
                    blob: push(&d.weights.codes, BlobType::U8),
                    scale: d.weights.quant.scale,
                    zero_point: d.weights.quant.zero_point,
                },
                bias: push(&i32_bytes(&d.bias), BlobType::I32),
                output: d.output,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool { size, stride } => LayerSpec::Maxpool {
                size: *size,
                stride: *stride,
            },
            Layer::AvgPool { size, stride } => LayerSpec::Avgpool {
                size: *size,
                stride: *stride,
            },
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Argmax => LayerSpec::Argmax,
        };
        layers.push(spec);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        name: model.name.clone(),
        input: InputSpec {
            shape: model.input_shape,
            scale: model.input_quant.scale,
            zero_point: model.input_quant.zero_point,
        },
        layers,
        blobs,
        checksum_sha256: sha256_hex(&blob_bytes),
        metadata: model.metadata.clone(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + blob_bytes.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob_bytes);
    out
}

pub fn save_model(model: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_model(model))
}

/// Labeled uint8 images, stored HWC.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub shape: [usize; 3],
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let size: usize = self.shape.iter().product();
        &self.images[i * size..(i + 1) * size]
    }

    /// First `n` samples.
    pub fn truncate(&mut self, n: usize) {
        let size: usize = self.shape.iter().product();
        self.labels.truncate(n);
        self.images.truncate(n * size);
    }

    /// `stem.images` and `stem.labels`.
    pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        let with = |ext: &str| {
            let mut s = stem.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        (with(".images"), with(".labels"))
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let (img_path, lbl_path) = Self::paths(stem.as_ref());
        Self::parse(&read_file(&img_path)?, &read_file(&lbl_path)?)
    }

    pub fn parse(images: &[u8], labels: &[u8]) -> Result<Self> {
        let mut r = Reader::new(images);
        r.magic(IMAGES_MAGIC)?;
        r.version()?;
        let count = r.u32("image count")? as usize;
        let shape = [
            r.u32("image height")? as usize,
            r.u32("image width")? as usize,
            r.u32("image channels")? as usize,
        ];
        let size: usize = shape.iter().product();
        let pixels = r.take(count * size, "image data")?.to_vec();

        let mut r = Reader::new(labels);
        r.magic(LABELS_MAGIC)?;
        r.version()?;
        let n_labels = r.u32("label count")? as usize;
        if n_labels != count {
            return Err(FormatError::Invalid(format!("{count} images but {n_labels} labels")));
        }
        let labels = r.take(count, "labels")?.to_vec();
        Ok(Self {
            shape,
            images: pixels,
            labels,
        })
    }

    pub fn encode(&self) -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(IMAGES_MAGIC);
        images.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        images.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for d in self.shape {
            images.extend_from_slice(&(d as u32).to_le_bytes());
        }
        images.extend_from_slice(&self.images);
        let mut labels = Vec::new();
        labels.extend_from_slice(LABELS_MAGIC);
        labels.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        labels.extend_from_slice(&(self.len() as u32).to_le_bytes());
        labels.extend_from_slice(&self.labels);
        (images, labels)
    }

    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let (img_path, lbl_path) = Self::paths(stem.as_ref());
        let (images, labels) = self.encode();
        write_file(&img_path, &images)?;
        write_file(&lbl_path, &labels)
    }
}
