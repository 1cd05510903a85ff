//! On-disk sample cache: one binary payload plus JSON sidecar per scan.
//!
//! The payload is the little-endian `f32` image followed by one `u8` class id per pixel.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, Modality, PatientRecord, SliceSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CACHE_FORMAT: &str = "spineseg-sample-v1";
const RECORDS_FILE: &str = "records.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub format: String,
    pub patient_id: String,
    pub modality: Modality,
    pub size: usize,
    pub fold: Option<usize>,
    pub eval_excluded: bool,
    pub payload_sha256: String,
}

fn payload(s: &SliceSample) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(s.image.len() * 4 + s.labels.len());
    for v in s.image.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(&s.labels);
    bytes
}

/// Writes every sample and the patient records. Rewriting the same dataset yields identical bytes.
pub fn write_cache(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    for s in &ds.samples {
        let bytes = payload(s);
        let sidecar = SampleSidecar {
            format: CACHE_FORMAT.into(),
            patient_id: s.patient_id.clone(),
            modality: s.modality,
            size: s.size(),
            fold: s.fold,
            eval_excluded: s.eval_excluded,
            payload_sha256: hex::encode(Sha256::digest(&bytes)),
        };
        let key = s.key();
        std::fs::write(dir.join(format!("{key}.bin")), &bytes)?;
        std::fs::write(dir.join(format!("{key}.json")), serde_json::to_string_pretty(&sidecar)?)?;
    }
    std::fs::write(dir.join(RECORDS_FILE), serde_json::to_string_pretty(&ds.records)?)?;
    Ok(())
}

fn read_sample(dir: &Path, sidecar_path: &Path) -> Result<SliceSample> {
    let text = std::fs::read_to_string(sidecar_path).map_err(|e| Error::file(sidecar_path, e))?;
    let meta: SampleSidecar = serde_json::from_str(&text).map_err(|e| Error::file(sidecar_path, e))?;
    if meta.format != CACHE_FORMAT {
        return Err(Error::file(sidecar_path, format!("unsupported cache format {:?}", meta.format)));
    }
    let key = format!("{}_{}", meta.patient_id, meta.modality.as_str());
    let bin = dir.join(format!("{key}.bin"));
    let bytes = std::fs::read(&bin).map_err(|e| Error::file(&bin, e))?;
    let n = meta.size * meta.size;
    if bytes.len() != n * 5 {
        return Err(Error::file(&bin, format!("payload is {} bytes, expected {}", bytes.len(), n * 5)));
    }
    if hex::encode(Sha256::digest(&bytes)) != meta.payload_sha256 {
        return Err(Error::file(&bin, "payload checksum mismatch"));
    }
    let image: Vec<f32> = bytes[..n * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let sample = SliceSample {
        image: Tensor::new(&[1, meta.size, meta.size], image)?,
        labels: bytes[n * 4..].to_vec(),
        patient_id: meta.patient_id,
        modality: meta.modality,
        fold: meta.fold,
        eval_excluded: meta.eval_excluded,
    };
    sample.validate(meta.size).map_err(|e| Error::file(&bin, e))?;
    Ok(sample)
}

/// Loads a cache directory written by [`write_cache`], samples sorted by key.
pub fn load_cache(dir: &Path) -> Result<Dataset> {
    let records_path = dir.join(RECORDS_FILE);
    if !records_path.is_file() {
        return Err(Error::Missing(format!("no sample cache at {}", dir.display())));
    }
    let text = std::fs::read_to_string(&records_path).map_err(|e| Error::file(&records_path, e))?;
    let records: Vec<PatientRecord> = serde_json::from_str(&text).map_err(|e| Error::file(&records_path, e))?;
    let mut sidecars: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.with_extension("bin").is_file())
        .collect();
    sidecars.sort();
    let samples = sidecars.iter().map(|p| read_sample(dir, p)).collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(Error::Missing(format!("sample cache {} is empty", dir.display())));
    }
    Ok(Dataset { samples, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixture::{synthetic_dataset, PhantomSpec};
    use crate::data::PipelineConfig;

    #[test]
    fn round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = synthetic_dataset(2, 1, &[Modality::T2w], &PhantomSpec::default(), &PipelineConfig::toy()).unwrap();
        ds.samples[1].fold = Some(3);
        write_cache(dir.path(), &ds).unwrap();
        let back = load_cache(dir.path()).unwrap();
        assert_eq!(back, ds);
        let bin = dir.path().join(format!("{}.bin", ds.samples[0].key()));
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&bin, bytes).unwrap();
        assert!(load_cache(dir.path()).is_err());
    }

    #[test]
    fn missing_cache_is_a_user_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_cache(&dir.path().join("nope")).unwrap_err();
        assert!(matches!(err, Error::Missing(_)));
    }
}
