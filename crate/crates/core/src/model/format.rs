//! `SFM1` binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SFM1" | u32 version (1) | u32 layer count
//! per layer: u8 kind | u32 hyperparams... | u64 element count | f32 weights, then bias
//! u32 label count | per label: u32 byte length, UTF-8 bytes
//! u32 CRC32 of everything before it
//! ```
//!
//! Hyperparameters: conv `in, out, kernel, stride, pad`; maxpool `size,
//! stride`; linear `in, out`; relu and gap have none.
//!
//! The file does not store the input resolution or the interpretation layer.
//! Loading assumes a 64x64 input and the last conv layer.

use std::fs;
use std::path::Path;

use super::{Layer, Model};
use crate::error::{Error, Result};
use crate::imageio::write_atomic;
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"SFM1";
const VERSION: u32 = 1;
const DEFAULT_INPUT_SIZE: usize = 64;

const KIND_CONV: u8 = 0;
const KIND_RELU: u8 = 1;
const KIND_MAXPOOL: u8 = 2;
const KIND_GAP: u8 = 3;
const KIND_LINEAR: u8 = 4;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_floats(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_model(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, model.layers.len());
    for layer in &model.layers {
        match layer {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                ..
            } => {
                out.push(KIND_CONV);
                for v in [in_channels, out_channels, kernel, stride, pad] {
                    put_u32(&mut out, *v);
                }
            }
            Layer::Relu => out.push(KIND_RELU),
            Layer::MaxPool { size, stride } => {
                out.push(KIND_MAXPOOL);
                put_u32(&mut out, *size);
                put_u32(&mut out, *stride);
            }
            Layer::GlobalAvgPool => out.push(KIND_GAP),
            Layer::Linear {
                in_features,
                out_features,
                ..
            } => {
                out.push(KIND_LINEAR);
                put_u32(&mut out, *in_features);
                put_u32(&mut out, *out_features);
            }
        }
        match layer.params() {
            Some((w, b)) => {
                out.extend_from_slice(&((w.len() + b.len()) as u64).to_le_bytes());
                put_floats(&mut out, w);
                put_floats(&mut out, b);
            }
            None => out.extend_from_slice(&0u64.to_le_bytes()),
        }
    }
    put_u32(&mut out, model.labels.len());
    for label in &model.labels {
        put_u32(&mut out, label.len());
        out.extend_from_slice(label.as_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedFile)?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn floats(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or(Error::TruncatedFile)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Tensor::from_parts(shape.to_vec(), data))
    }
}

fn count_matches(count: u64, expected: usize, index: usize) -> Result<()> {
    if count != expected as u64 {
        return Err(Error::InvalidModel(format!(
            "layer {index}: {count} stored elements, hyperparameters imply {expected}"
        )));
    }
    Ok(())
}

pub fn read_model(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedFile);
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < 8 {
        return Err(Error::TruncatedFile);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::VersionMismatch(version));
    }
    // Parse before checking the CRC so a short file reports truncation.
    let mut r = Reader { bytes, pos: 8 };
    let n_layers = r.u32()?;
    let mut layers = Vec::new();
    for i in 0..n_layers {
        let kind = r.u8()?;
        let layer = match kind {
            KIND_CONV => {
                let (cin, cout, k, stride, pad) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                count_matches(r.u64()?, cout * cin * k * k + cout, i)?;
                Layer::Conv2d {
                    in_channels: cin,
                    out_channels: cout,
                    kernel: k,
                    stride,
                    pad,
                    weight: r.floats(&[cout, cin, k, k])?,
                    bias: r.floats(&[cout])?,
                }
            }
            KIND_RELU | KIND_GAP => {
                count_matches(r.u64()?, 0, i)?;
                if kind == KIND_RELU {
                    Layer::Relu
                } else {
                    Layer::GlobalAvgPool
                }
            }
            KIND_MAXPOOL => {
                let (size, stride) = (r.u32()?, r.u32()?);
                count_matches(r.u64()?, 0, i)?;
                Layer::MaxPool { size, stride }
            }
            KIND_LINEAR => {
                let (fin, fout) = (r.u32()?, r.u32()?);
                count_matches(r.u64()?, fout * fin + fout, i)?;
                Layer::Linear {
                    in_features: fin,
                    out_features: fout,
                    weight: r.floats(&[fout, fin])?,
                    bias: r.floats(&[fout])?,
                }
            }
            other => return Err(Error::InvalidModel(format!("layer {i}: unknown kind {other}"))),
        };
        layers.push(layer);
    }
    let n_labels = r.u32()?;
    let mut labels = Vec::new();
    for _ in 0..n_labels {
        let len = r.u32()?;
        let raw = r.take(len)?;
        labels.push(
            String::from_utf8(raw.to_vec())
                .map_err(|_| Error::InvalidModel("label is not UTF-8".into()))?,
        );
    }
    let body_end = r.pos;
    let stored = r.u32()? as u32;
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    if r.pos != bytes.len() {
        return Err(Error::InvalidModel(format!(
            "{} trailing bytes after checksum",
            bytes.len() - r.pos
        )));
    }
    let interp_layer = layers
        .iter()
        .rposition(|l| matches!(l, Layer::Conv2d { .. }))
        .ok_or_else(|| Error::InvalidModel("model has no conv layer".into()))?;
    let channels = match &layers[0] {
        Layer::Conv2d { in_channels, .. } => *in_channels,
        _ => 3,
    };
    let model = Model {
        layers,
        interp_layer,
        labels,
        input_shape: [channels, DEFAULT_INPUT_SIZE, DEFAULT_INPUT_SIZE],
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, &write_model(model))
}

pub fn load_model(path: &Path) -> Result<Model> {
    read_model(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
