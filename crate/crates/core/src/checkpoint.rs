//! `CSIW` tensor container and network checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CSIW" | u32 version | u64 header_len | header (UTF-8 JSON) | payload
//! ```
//!
//! The header maps each tensor name to `{"dtype": "f32", "shape": [..],
//! "offset": n}` where `offset` is the byte offset into the payload. Free-form
//! metadata lives under the reserved `__metadata__` key. Tensors are laid out
//! in name order, so identical contents always serialize to identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::net::CsiNetwork;
use crate::sketch::Style;
use crate::tensor::{Parameterized, Tensor};

pub const MAGIC: &[u8; 4] = b"CSIW";
pub const FORMAT_VERSION: u32 = 1;
const METADATA_KEY: &str = "__metadata__";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub metadata: Value,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

impl TensorFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Map::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            header.insert(
                name.clone(),
                json!({"dtype": "f32", "shape": t.shape(), "offset": offset}),
            );
            offset += t.len() * 4;
        }
        if !self.metadata.is_null() {
            header.insert(METADATA_KEY.into(), self.metadata.clone());
        }
        let header = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::CorruptCheckpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing CSIW magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("header extends past end of file"))?;
        let header: Map<String, Value> = serde_json::from_slice(&bytes[16..payload_start])?;
        let payload = &bytes[payload_start..];

        let mut file = TensorFile::default();
        for (name, entry) in header {
            if name == METADATA_KEY {
                file.metadata = entry;
                continue;
            }
            let entry: Entry = serde_json::from_value(entry)?;
            if entry.dtype != "f32" {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor `{name}` has dtype {}",
                    entry.dtype
                )));
            }
            let numel: usize = entry.shape.iter().product();
            let end = entry
                .offset
                .checked_add(numel * 4)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor `{name}` extends past payload")))?;
            let data = payload[entry.offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(entry.shape, data)
                .map_err(|e| Error::CorruptCheckpoint(format!("tensor `{name}`: {e}")))?;
            file.tensors.insert(name, t);
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// The named tensor, which must have exactly `shape`.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor<f32>> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if t.shape() != shape {
            return Err(Error::TensorShape {
                name: name.to_string(),
                found: t.shape().to_vec(),
                expected: shape.to_vec(),
            });
        }
        Ok(t)
    }
}

/// Bookkeeping stored next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub in_channels: usize,
    pub iteration: u64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub style: Option<Style>,
    pub image_size: usize,
}

impl TrainingMeta {
    pub fn fresh(in_channels: usize, seed: u64) -> Self {
        TrainingMeta {
            in_channels,
            iteration: 0,
            seed,
            loss_weights: LossWeights::default(),
            style: None,
            image_size: 96,
        }
    }
}

/// A network with its running statistics, optimizer state and metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: CsiNetwork<f32>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn to_tensor_file(&self) -> TensorFile {
        let net = &self.network;
        let mut file = TensorFile::default();
        for ((conv, bn), unit) in net.unit_names().into_iter().zip(net.units()) {
            file.tensors
                .insert(format!("{bn}.running_mean"), unit.bn.running_mean.clone());
            file.tensors
                .insert(format!("{bn}.running_var"), unit.bn.running_var.clone());
            let _ = conv;
        }
        let mut steps = Map::new();
        for (name, p) in net.parameter_names().into_iter().zip(net.parameters()) {
            file.tensors.insert(format!("{name}.adam_m"), p.m.clone());
            file.tensors.insert(format!("{name}.adam_v"), p.v.clone());
            file.tensors.insert(name.clone(), p.value.clone());
            steps.insert(name, json!(p.step_count));
        }
        file.metadata = json!({
            "training": self.meta,
            "adam_steps": steps,
        });
        file
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let meta: TrainingMeta = serde_json::from_value(
            file.metadata
                .get("training")
                .cloned()
                .ok_or_else(|| Error::CorruptCheckpoint("metadata has no training record".into()))?,
        )?;
        let steps = file
            .metadata
            .get("adam_steps")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::CorruptCheckpoint("metadata has no optimizer step counts".into()))?;
        let mut net = CsiNetwork::<f32>::build(meta.in_channels, 0)?;
        let mut expected = 0usize;

        let names = net.parameter_names();
        for (name, p) in names.iter().zip(net.parameters_mut()) {
            let shape = p.shape().to_vec();
            p.value = file.expect(name, &shape)?.clone();
            p.m = file.expect(&format!("{name}.adam_m"), &shape)?.clone();
            p.v = file.expect(&format!("{name}.adam_v"), &shape)?.clone();
            p.step_count = steps
                .get(name)
                .and_then(Value::as_u64)
                .ok_or_else(|| Error::MissingTensor(format!("{name} (optimizer step count)")))?;
            p.zero_grad();
            expected += 3;
        }
        let unit_names = net.unit_names();
        for ((_, bn), unit) in unit_names.iter().zip(net.units_mut()) {
            let c = unit.bn.channels();
            unit.bn.running_mean = file.expect(&format!("{bn}.running_mean"), &[c])?.clone();
            unit.bn.running_var = file.expect(&format!("{bn}.running_var"), &[c])?.clone();
            expected += 2;
        }
        if file.tensors.len() != expected {
            let known: std::collections::BTreeSet<String> = names
                .iter()
                .flat_map(|n| [n.clone(), format!("{n}.adam_m"), format!("{n}.adam_v")])
                .chain(
                    unit_names
                        .iter()
                        .flat_map(|(_, bn)| [format!("{bn}.running_mean"), format!("{bn}.running_var")]),
                )
                .collect();
            let extra: Vec<_> = file.tensors.keys().filter(|k| !known.contains(*k)).collect();
            return Err(Error::CorruptCheckpoint(format!("unexpected tensors {extra:?}")));
        }
        Ok(Checkpoint { network: net, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::load(path)?)
    }
}
