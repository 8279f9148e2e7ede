//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes   "PMARGCKP"
//! version  u32 LE
//! hlen     u64 LE    length of the JSON header in bytes
//! header   hlen bytes of UTF-8 JSON (CheckpointHeader)
//! payload  f64 LE values, in the order listed by header.layout:
//!          backbone.{i}.weight, backbone.{i}.bias for each conv layer,
//!          prototypes ([m, c] row-major), w1 ([3, m] row-major),
//!          h2.weights ([3]), h2.bias ([1])
//! ```
//!
//! The header records the payload length and its SHA-256 so truncation and
//! bit rot are reported instead of silently loading garbage.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArchConfig, ConvLayer, MalignancyHead, ModelParams, Provenance};
use crate::autodiff::Tensor;
use crate::classes::{MarginClass, NUM_CLASSES};
use crate::error::{Error, IoContext, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PMARGCKP";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub arch: ArchConfig,
    pub prototype_class: Vec<MarginClass>,
    pub provenance: Vec<Option<Provenance>>,
    pub w1_initialized: bool,
    pub layout: Vec<LayoutEntry>,
    pub payload_values: usize,
    pub payload_sha256: String,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn layout_and_payload(params: &ModelParams) -> (Vec<LayoutEntry>, Vec<f64>) {
    let mut layout = Vec::new();
    let mut payload = Vec::new();
    for (i, layer) in params.backbone.iter().enumerate() {
        layout.push(LayoutEntry {
            name: format!("backbone.{i}.weight"),
            shape: layer.weight.shape().to_vec(),
        });
        payload.extend_from_slice(layer.weight.data());
        layout.push(LayoutEntry {
            name: format!("backbone.{i}.bias"),
            shape: layer.bias.shape().to_vec(),
        });
        payload.extend_from_slice(layer.bias.data());
    }
    layout.push(LayoutEntry {
        name: "prototypes".into(),
        shape: vec![params.num_prototypes(), params.arch.latent_channels],
    });
    for p in &params.prototypes {
        payload.extend_from_slice(p.data());
    }
    layout.push(LayoutEntry {
        name: "w1".into(),
        shape: params.w1.shape().to_vec(),
    });
    payload.extend_from_slice(params.w1.data());
    layout.push(LayoutEntry {
        name: "h2.weights".into(),
        shape: vec![NUM_CLASSES],
    });
    payload.extend_from_slice(&params.h2.weights);
    layout.push(LayoutEntry {
        name: "h2.bias".into(),
        shape: vec![1],
    });
    payload.push(params.h2.bias);
    (layout, payload)
}

/// Serialises `params` to the checkpoint byte format.
pub fn encode_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    let (layout, payload) = layout_and_payload(params);
    let mut body = Vec::with_capacity(payload.len() * 8);
    for v in &payload {
        body.extend_from_slice(&v.to_le_bytes());
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        arch: params.arch.clone(),
        prototype_class: params.prototype_class.clone(),
        provenance: params.provenance.clone(),
        w1_initialized: params.w1_initialized,
        layout,
        payload_values: payload.len(),
        payload_sha256: sha256_hex(&body),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&body);
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body_start = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("header extends past end of file"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..body_start])
        .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    let body = &bytes[body_start..];
    if body.len() != header.payload_values * 8 {
        return Err(corrupt(format!(
            "payload holds {} bytes, header promises {}",
            body.len(),
            header.payload_values * 8
        )));
    }
    if sha256_hex(body) != header.payload_sha256 {
        return Err(corrupt("payload checksum mismatch"));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let expected: usize = header
        .layout
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if expected != values.len() {
        return Err(corrupt("layout does not account for the payload"));
    }

    let mut cursor = 0;
    let mut take = |entry: &LayoutEntry| -> Result<Tensor> {
        let n: usize = entry.shape.iter().product();
        let t = Tensor::new(entry.shape.clone(), values[cursor..cursor + n].to_vec())?;
        cursor += n;
        Ok(t)
    };
    let mut entries = header.layout.iter();
    let mut next = |name: &str| -> Result<&LayoutEntry> {
        let e = entries
            .next()
            .ok_or_else(|| corrupt(format!("layout ends before {name}")))?;
        if e.name != name {
            return Err(corrupt(format!("expected layout entry {name}, found {}", e.name)));
        }
        Ok(e)
    };

    let mut backbone = Vec::new();
    for i in 0..4 {
        let weight = take(next(&format!("backbone.{i}.weight"))?)?;
        let bias = take(next(&format!("backbone.{i}.bias"))?)?;
        backbone.push(ConvLayer { weight, bias });
    }
    let protos = take(next("prototypes")?)?;
    let m = header.prototype_class.len();
    let c = header.arch.latent_channels;
    if protos.shape() != [m, c] || header.provenance.len() != m {
        return Err(corrupt("prototype table does not match class tags"));
    }
    let prototypes = protos
        .data()
        .chunks_exact(c)
        .map(|row| Tensor::vector(row.to_vec()))
        .collect();
    let w1 = take(next("w1")?)?;
    if w1.shape() != [NUM_CLASSES, m] {
        return Err(corrupt("w1 shape does not match prototype count"));
    }
    let hw = take(next("h2.weights")?)?;
    let hb = take(next("h2.bias")?)?;
    let h2 = MalignancyHead {
        weights: [hw.data()[0], hw.data()[1], hw.data()[2]],
        bias: hb.item(),
    };
    header.arch.validate()?;
    Ok(ModelParams {
        arch: header.arch,
        backbone,
        prototypes,
        prototype_class: header.prototype_class,
        provenance: header.provenance,
        w1,
        h2,
        w1_initialized: header.w1_initialized,
    })
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::write(path, bytes).at(path)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).at(path)?;
    decode_checkpoint(&bytes)
}
