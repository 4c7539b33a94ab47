//! Checkpoint archive.
//!
//! ```text
//! b"WSODCKPT"  u32 LE format version  u64 LE header length
//! header: JSON CheckpointHeader
//! payload: every tensor as little-endian f64, in header order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, Network, Params};
use crate::error::{Error, Result};
use crate::rng::rng_for;

const MAGIC: &[u8; 8] = b"WSODCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// Offset into the payload, in elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// SHA-256 of the canonical JSON of the run configuration.
    pub config_hash: String,
    pub iteration: usize,
    pub model: ModelConfig,
    /// The full run configuration the checkpoint was trained with.
    pub run_config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("JSON values always serialize");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn to_bytes(net: &Network, iteration: usize, run_config: &serde_json::Value) -> Vec<u8> {
    let tensors = net.params.tensors();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let header = CheckpointHeader {
        config_hash: config_hash(run_config),
        iteration,
        model: net.config.clone(),
        run_config: run_config.clone(),
        tensors: entries,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + header.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &tensors {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> std::result::Result<(Network, CheckpointHeader), String> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err("truncated header".into());
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| e.to_string())?;
    header.model.validate().map_err(|e| e.to_string())?;
    let payload = &body[hlen..];
    let mut params = Params::init(&header.model, &mut rng_for(0, &[]));
    let slots = params.tensors_mut();
    if slots.len() != header.tensors.len() {
        return Err(format!(
            "checkpoint lists {} tensors, model has {}",
            header.tensors.len(),
            slots.len()
        ));
    }
    for ((name, dst), entry) in slots.into_iter().zip(&header.tensors) {
        if name != entry.name || dst.len() != entry.len {
            return Err(format!(
                "tensor {} does not match model slot {name}",
                entry.name
            ));
        }
        let end = (entry.offset + entry.len) * 8;
        let src = payload
            .get(entry.offset * 8..end)
            .ok_or_else(|| format!("payload truncated at {}", entry.name))?;
        for (d, chunk) in dst.iter_mut().zip(src.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    Ok((
        Network {
            config: header.model.clone(),
            params,
        },
        header,
    ))
}

pub fn save(
    path: &Path,
    net: &Network,
    iteration: usize,
    run_config: &serde_json::Value,
) -> Result<()> {
    std::fs::write(path, to_bytes(net, iteration, run_config)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Network, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|message| Error::Parse {
        path: path.to_path_buf(),
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = ModelConfig {
            backbone_channels: [2, 3, 4, 4],
            roi_size: 3,
            hidden: 5,
            embed_hidden: 4,
            embed_dim: 3,
            dropblock_size: 2,
            ..ModelConfig::default()
        };
        let net = Network::new(cfg, &mut rng_for(11, &[])).unwrap();
        let run = serde_json::json!({"lr": 0.01, "seed": 3});
        let bytes = to_bytes(&net, 42, &run);
        let (back, header) = from_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(header.iteration, 42);
        assert_eq!(header.config_hash, config_hash(&run));
        assert!(header
            .tensors
            .iter()
            .any(|t| t.name == "refine.stage3.weight"));
        assert_eq!(to_bytes(&back, 42, &run), bytes);
    }

    #[test]
    fn rejects_garbage() {
        assert!(from_bytes(b"nope").is_err());
        let mut b = to_bytes(
            &Network::new(ModelConfig::default(), &mut rng_for(0, &[])).unwrap(),
            0,
            &serde_json::Value::Null,
        );
        b.truncate(b.len() - 3);
        assert!(from_bytes(&b).is_err());
    }
}
