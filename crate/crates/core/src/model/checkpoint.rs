//! Checkpoint file: 8-byte magic, little-endian u64 JSON length, a JSON
//! parameter manifest, then every tensor as raw little-endian f32 in
//! manifest order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Network};
use crate::error::{Error, Result};
use crate::nn::Scalar;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TLCKPT\0\x01";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    schema_version: u32,
    model_config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint<T: Scalar>(net: &mut Network<T>, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    net.visit_params(&mut |name, p| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.shape.clone(),
            trainable: p.trainable,
        });
        for v in &p.value {
            payload.extend_from_slice(&(v.to_f64().unwrap() as f32).to_le_bytes());
        }
    });
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        model_config: net.config.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&manifest).map_err(|e| Error::json("checkpoint manifest", e))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut write = |b: &[u8]| f.write_all(b).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&(header.len() as u64).to_le_bytes())?;
    write(&header)?;
    write(&payload)
}

/// Load a checkpoint, verifying every tensor name and shape against the
/// network its config describes.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Network<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header = bytes
        .get(16..16 + header_len)
        .ok_or_else(|| bad("truncated header"))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(header).map_err(|e| Error::json(path.display().to_string(), e))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(bad("unsupported schema_version"));
    }
    let mut net = Network::<T>::new(&manifest.model_config)?;
    let mut offset = 16 + header_len;
    let mut entries = manifest.tensors.iter();
    let mut failure: Option<Error> = None;
    net.visit_params(&mut |name, p| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = entries.next() else {
            failure = Some(Error::Shape(format!("checkpoint is missing tensor {name}")));
            return;
        };
        if entry.name != name || entry.shape != p.shape {
            failure = Some(Error::Shape(format!(
                "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                entry.name, entry.shape, name, p.shape
            )));
            return;
        }
        let n = p.len();
        let Some(raw) = bytes.get(offset..offset + 4 * n) else {
            failure = Some(Error::Shape(format!("checkpoint data truncated at {name}")));
            return;
        };
        for (v, c) in p.value.iter_mut().zip(raw.chunks_exact(4)) {
            *v = T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        }
        offset += 4 * n;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if entries.next().is_some() || offset != bytes.len() {
        return Err(Error::Shape("checkpoint has extra tensors or trailing data".into()));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, Tensor};

    #[test]
    fn roundtrip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let config = ModelConfig {
            channels: 4,
            n_resblocks: 2,
            seed: 9,
            ..ModelConfig::default()
        };
        let mut net = Network::<f32>::new(&config).unwrap();
        net.stem_bn.running_mean.value[0] = 0.25;
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&mut net, &path).unwrap();
        let mut back = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back.config, config);
        let x = Tensor::from_vec([1, 1, 8, 8, 8], (0..512).map(|i| (i as f32).sin()).collect());
        assert_eq!(
            net.backbone_forward(&x, Mode::Eval).unwrap(),
            back.backbone_forward(&x, Mode::Eval).unwrap()
        );
    }

    #[test]
    fn rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = Network::<f32>::new(&ModelConfig {
            channels: 2,
            n_resblocks: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&mut net, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }
}
