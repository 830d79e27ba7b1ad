//! Checkpoint files.
//!
//! Layout: `WOODNET1`, a little-endian `u32` header length, the header as
//! canonical JSON, then every parameter as little-endian `f32` in layer order
//! with each layer's weights before its bias.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datapipe::pack::{canonical_json, read_framed_header};
use crate::datapipe::Normalization;
use crate::error::{Error, Result};
use crate::models::{Network, NetworkSpec};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WOODNET1";

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    dtype: String,
    class_names: Vec<String>,
    normalization: Option<Normalization>,
    metadata: TrainingMetadata,
    param_count: usize,
}

/// A network together with what is needed to use it on new images.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network,
    pub normalization: Option<Normalization>,
    pub metadata: TrainingMetadata,
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Self {
            network,
            normalization: None,
            metadata: TrainingMetadata::default(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(&self.network, self.normalization, self.metadata)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, start) = read_framed_header::<Header>(bytes, CHECKPOINT_MAGIC)?;
        if header.dtype != "f32" {
            return Err(Error::format(12, format!("unsupported dtype {:?}", header.dtype)));
        }
        if header.class_names != header.spec.class_names {
            return Err(Error::format(12, "class names disagree with the network spec"));
        }
        let mut network = Network::from_spec(&header.spec).map_err(|e| Error::format(12, e.to_string()))?;
        let count = network.num_params();
        if header.param_count != count {
            return Err(Error::format(
                12,
                format!("header declares {} parameters, spec implies {count}", header.param_count),
            ));
        }
        let payload = &bytes[start..];
        if payload.len() != 4 * count {
            return Err(Error::format(
                start + payload.len().min(4 * count),
                format!("payload is {} bytes, expected {}", payload.len(), 4 * count),
            ));
        }
        let mut words = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        for layer in network.layers_mut() {
            for slot in layer.params_mut() {
                for v in slot.value.data_mut() {
                    *v = words.next().unwrap();
                }
            }
        }
        Ok(Self {
            network,
            normalization: header.normalization,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.network, self.normalization, self.metadata, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_checkpoint(path)
    }
}

fn encode(network: &Network, normalization: Option<Normalization>, metadata: TrainingMetadata) -> Result<Vec<u8>> {
    let spec = network.spec();
    let header = Header {
        class_names: spec.class_names.clone(),
        spec,
        dtype: "f32".into(),
        normalization,
        metadata,
        param_count: network.num_params(),
    };
    let json = canonical_json(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * header.param_count);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    for slot in network.params() {
        for v in slot.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(
    network: &Network,
    normalization: Option<Normalization>,
    metadata: TrainingMetadata,
    path: &Path,
) -> Result<()> {
    let bytes = encode(network, normalization, metadata)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
