//! Binary checkpoint format.
//!
//! ```text
//! "RDNC" | version: u16 LE | header_len: u32 LE | header (JSON) | payload
//! ```
//!
//! The header carries the model configuration, training metadata and a
//! tensor table (name, shape, byte offset into the payload, CRC-32). The
//! payload is the concatenation of all tensors as little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optimizer::RmsProp;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"RDNC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: Option<usize>,
    pub phase: Option<u8>,
    pub class_names: Vec<String>,
    pub train_config: Option<TrainConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    checksum: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    meta: CheckpointMeta,
    trainable: Vec<bool>,
    has_optimizer: bool,
    optimizer: Option<[f64; 3]>,
    tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Option<RmsProp<f32>>,
    pub meta: CheckpointMeta,
}

fn encode(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Each tensor's name, shape and values in file order.
fn collect_tensors<'a>(model: &'a Model<f32>, opt: Option<&'a RmsProp<f32>>) -> Vec<(String, Vec<usize>, &'a [f32])> {
    let mut out = Vec::new();
    for layer in model.layers() {
        for (name, p) in layer.param_names().into_iter().zip(&layer.params) {
            out.push((format!("{}/{name}", layer.name), p.shape().to_vec(), p.data()));
        }
        if let Some(bn) = &layer.bn {
            let c = bn.running_mean.len();
            out.push((format!("{}/running_mean", layer.name), vec![c], &bn.running_mean[..]));
            out.push((format!("{}/running_var", layer.name), vec![c], &bn.running_var[..]));
        }
    }
    if let Some(opt) = opt {
        for (layer, acc) in model.layers().iter().zip(&opt.accum) {
            for ((name, p), a) in layer.param_names().into_iter().zip(&layer.params).zip(acc) {
                out.push((format!("optimizer/{}/{name}", layer.name), p.shape().to_vec(), &a[..]));
            }
        }
    }
    out
}

pub fn encode_checkpoint(model: &Model<f32>, optimizer: Option<&RmsProp<f32>>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, data) in collect_tensors(model, optimizer) {
        let bytes = encode(data);
        tensors.push(TensorEntry {
            name,
            shape,
            offset: payload.len(),
            checksum: crc32fast::hash(&bytes),
        });
        payload.extend_from_slice(&bytes);
    }
    let header = Header {
        model_config: model.config().clone(),
        meta: meta.clone(),
        trainable: model.layers().iter().map(|l| l.trainable).collect(),
        has_optimizer: optimizer.is_some(),
        optimizer: optimizer.map(|o| [f64::from(o.lr), f64::from(o.rho), f64::from(o.eps)]),
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(10 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint(model: &Model<f32>, optimizer: Option<&RmsProp<f32>>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model, optimizer, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |reason: String| Error::format(path, reason);
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(bad("missing RDNC magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let header_end = 10usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[10..header_end]).map_err(|e| bad(format!("corrupt header: {e}")))?;
    let payload = &bytes[header_end..];

    let mut model = Model::<f32>::build(&header.model_config)?;
    let mut optimizer = header
        .has_optimizer
        .then(|| {
            let [lr, rho, eps] = header.optimizer.unwrap_or([0.0; 3]);
            RmsProp::new(model.layers(), lr, rho, eps)
        });
    let expected: Vec<(String, Vec<usize>)> = collect_tensors(&model, optimizer.as_ref())
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(bad(format!(
            "header lists {} tensors, architecture needs {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut decoded = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(bad(format!(
                "tensor {} {:?} disagrees with architecture tensor {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let len = shape.iter().product::<usize>() * 4;
        let raw = entry
            .offset
            .checked_add(len)
            .and_then(|end| payload.get(entry.offset..end))
            .ok_or_else(|| bad(format!("truncated payload for tensor {name}")))?;
        if crc32fast::hash(raw) != entry.checksum {
            return Err(bad(format!("checksum mismatch for tensor {name}")));
        }
        decoded.push(
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect::<Vec<f32>>(),
        );
    }
    if header.trainable.len() != model.num_layers() {
        return Err(bad("trainable table does not match layer count".into()));
    }

    let mut it = decoded.into_iter();
    for (layer, &trainable) in model.layers_mut().iter_mut().zip(&header.trainable) {
        layer.trainable = trainable;
        for p in layer.params.iter_mut() {
            p.data_mut().copy_from_slice(&it.next().expect("counted above"));
        }
        if let Some(bn) = layer.bn.as_mut() {
            bn.running_mean = it.next().expect("counted above");
            bn.running_var = it.next().expect("counted above");
        }
    }
    if let Some(opt) = optimizer.as_mut() {
        for acc in opt.accum.iter_mut().flatten() {
            *acc = it.next().expect("counted above");
        }
    }
    Ok(Checkpoint {
        model,
        optimizer,
        meta: header.meta,
    })
}
