//! Checkpoint files: 8-byte magic, little-endian `u64` header length, JSON header,
//! then every parameter tensor as little-endian `f32` in header order.
//! A `.arch.json` sidecar repeats the architecture for inspection.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::networks::{ArchDescriptor, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SPSEGCK1";
pub const CHECKPOINT_FORMAT: &str = "spineseg-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub descriptor: ArchDescriptor,
    pub tensors: Vec<TensorEntry>,
    pub step: usize,
    pub epoch: usize,
    /// Validation score at which this snapshot was selected.
    pub metric: f64,
    pub config_hash: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub step: usize,
    pub epoch: usize,
    pub metric: f64,
    pub config: TrainConfig,
}

pub fn arch_sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".arch.json");
    PathBuf::from(s)
}

impl Checkpoint {
    fn header(&self) -> Result<CheckpointHeader> {
        let tensors = self
            .params
            .names()
            .iter()
            .zip(self.params.tensors())
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Ok(CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            descriptor: self.params.descriptor().clone(),
            tensors,
            step: self.step,
            epoch: self.epoch,
            metric: self.metric,
            config_hash: self.config.hash()?,
            config: self.config.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = self.header()?;
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + json.len() + self.params.parameter_count() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for t in self.params.tensors() {
            buf.extend_from_slice(bytemuck::cast_slice(t.data()));
        }
        if cfg!(target_endian = "big") {
            return Err(Error::Checkpoint("big-endian hosts are not supported".into()));
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        f.write_all(&buf).map_err(|e| Error::file(path, e))?;
        let arch = serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "descriptor": header.descriptor,
            "tensors": header.tensors,
            "parameter_count": self.params.parameter_count(),
        });
        let side = arch_sidecar_path(path);
        std::fs::write(&side, serde_json::to_string_pretty(&arch)?).map_err(|e| Error::file(&side, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bad = |m: String| Error::file(path, format!("checkpoint format: {m}"));
        let mut f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::file(path, e))?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported format {:?}", header.format)));
        }
        let mut offset = 16 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(offset..offset + n * 4)
                .ok_or_else(|| bad(format!("payload truncated at {}", e.name)))?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(Tensor::new(&e.shape, data)?);
            offset += n * 4;
        }
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
        }
        let params = ModelParams::from_tensors(header.descriptor.clone(), tensors).map_err(|e| bad(e.to_string()))?;
        if params.names().iter().zip(&header.tensors).any(|(a, b)| *a != b.name) {
            return Err(bad("tensor names do not match the architecture".into()));
        }
        if header.config.hash()? != header.config_hash {
            return Err(bad("config hash mismatch".into()));
        }
        Ok(Checkpoint {
            params,
            step: header.step,
            epoch: header.epoch,
            metric: header.metric,
            config: header.config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ModelKind;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = TrainConfig::toy(ModelKind::Unet);
        let params = ModelParams::init(cfg.descriptor(), 3).unwrap();
        let ck = Checkpoint { params, step: 7, epoch: 1, metric: 0.5, config: cfg };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        assert!(arch_sidecar_path(&path).is_file());
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.step, 7);
        for (a, b) in ck.params.tensors().iter().zip(back.params.tensors()) {
            assert_eq!(a.data(), b.data());
        }
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        assert!(Checkpoint::load(&path).unwrap_err().to_string().contains("truncated"));
    }
}
