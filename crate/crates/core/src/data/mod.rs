//! MRI ingestion and preprocessing into central-slice training samples.
//!
//! Stage order is fixed: intensity normalization, reorientation to RAS+,
//! isotropic resampling, central sagittal slice, pad-and-resize, and mask encoding.

pub mod cache;
pub mod fixture;
pub mod labels;
pub mod metadata;
pub mod nifti_io;
pub mod volume;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use labels::{encode_mask, Class, LabelMap, LabelRule, Structure, CLASS_COUNT};
pub use metadata::{read_metadata, write_metadata, Pathology, PatientRecord};
pub use volume::{nearest_rank, resize_image, resize_labels, AxisCode, Orientation, Volume, RAS};

use crate::error::{Error, Result};
use crate::tensor::{one_hot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "t1w")]
    T1w,
    #[serde(rename = "t2w")]
    T2w,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::T1w, Modality::T2w];

    /// File-name tag, as in `12_t2.nii.gz`.
    pub fn tag(self) -> &'static str {
        match self {
            Modality::T1w => "t1",
            Modality::T2w => "t2",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::T1w => "t1w",
            Modality::T2w => "t2w",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" | "t1w" => Ok(Modality::T1w),
            "t2" | "t2w" => Ok(Modality::T2w),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Input-contrast setting of a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityFilter {
    T1w,
    T2w,
    Both,
}

impl ModalityFilter {
    pub const ALL: [ModalityFilter; 3] = [ModalityFilter::T1w, ModalityFilter::T2w, ModalityFilter::Both];

    pub fn accepts(self, m: Modality) -> bool {
        match self {
            ModalityFilter::T1w => m == Modality::T1w,
            ModalityFilter::T2w => m == Modality::T2w,
            ModalityFilter::Both => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityFilter::T1w => "t1w",
            ModalityFilter::T2w => "t2w",
            ModalityFilter::Both => "both",
        }
    }
}

impl std::str::FromStr for ModalityFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" | "t1w" => Ok(ModalityFilter::T1w),
            "t2" | "t2w" => Ok(ModalityFilter::T2w),
            "both" | "t1w+t2w" => Ok(ModalityFilter::Both),
            other => Err(Error::Config(format!("unknown modality setting {other:?}"))),
        }
    }
}


/// A raw MRI scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVolume {
    pub volume: Volume<f32>,
    pub modality: Modality,
    pub patient_id: String,
}

/// Raw annotation codes aligned with an [`ImageVolume`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub volume: Volume<i32>,
    pub patient_id: String,
}

/// One preprocessed central slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    /// `[1, S, S]`, values in [0, 255].
    pub image: Tensor,
    /// Class id per pixel, row-major `S × S`.
    pub labels: Vec<u8>,
    pub patient_id: String,
    pub modality: Modality,
    pub fold: Option<usize>,
    /// Oblique acquisitions are kept for training but never scored.
    pub eval_excluded: bool,
}

impl SliceSample {
    pub fn size(&self) -> usize {
        self.image.shape().last().copied().unwrap_or(0)
    }

    /// One-hot `[4, S, S]` mask.
    pub fn mask(&self) -> Tensor {
        let s = self.size();
        one_hot(&self.labels, CLASS_COUNT, s, s).expect("sample labels are validated")
    }

    pub fn key(&self) -> String {
        format!("{}_{}", self.patient_id, self.modality.as_str())
    }

    pub fn validate(&self, size: usize) -> Result<()> {
        self.image.ensure_shape(&[1, size, size])?;
        if self.labels.len() != size * size {
            return Err(Error::shape(&[size * size], &[self.labels.len()]));
        }
        if let Some(v) = self.image.data().iter().find(|v| !(0.0..=255.0).contains(*v)) {
            return Err(Error::InvalidRange(format!("{}: image value {v} outside [0, 255]", self.key())));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= CLASS_COUNT) {
            return Err(Error::UnknownLabel(l as i64));
        }
        Ok(())
    }
}

fn default_target_mm() -> f64 {
    1.0
}
fn default_image_size() -> usize {
    320
}
fn default_percentile() -> f64 {
    98.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default = "default_target_mm")]
    pub target_mm: f64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_percentile")]
    pub percentile: f64,
    #[serde(default)]
    pub label_map: LabelMap,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            target_mm: default_target_mm(),
            image_size: default_image_size(),
            percentile: default_percentile(),
            label_map: LabelMap::default(),
        }
    }
}

impl PipelineConfig {
    /// 64 × 64 samples for the synthetic fixtures.
    pub fn toy() -> Self {
        PipelineConfig {
            image_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_mm > 0.0) || self.image_size == 0 || !(0.0..=100.0).contains(&self.percentile) {
            return Err(Error::Config(format!(
                "pipeline needs positive spacing and size and a percentile in [0, 100], got {self:?}"
            )));
        }
        self.label_map.validate()
    }
}

fn check_aligned(image: &Volume<f32>, labels: &Volume<i32>) -> Result<()> {
    if image.shape() != labels.shape() {
        return Err(Error::shape(&image.shape(), &labels.shape()));
    }
    let close = image
        .spacing
        .iter()
        .zip(&labels.spacing)
        .all(|(a, b)| (a - b).abs() <= 1e-3 * a.abs().max(b.abs()));
    if !close || image.orientation != labels.orientation {
        return Err(Error::Config(format!(
            "image ({:?} mm, {}) and labels ({:?} mm, {}) are not aligned",
            image.spacing, image.orientation, labels.spacing, labels.orientation
        )));
    }
    Ok(())
}

/// Volume-level stages: reorient to RAS+, resample to isotropic spacing, normalize intensity.
pub fn preprocess_volumes(
    image: &Volume<f32>,
    labels: &Volume<i32>,
    cfg: &PipelineConfig,
) -> Result<(Volume<f32>, Volume<i32>)> {
    check_aligned(image, labels)?;
    let image = image
        .reorient_ras()
        .resample_linear(cfg.target_mm)?
        .normalize_intensity(cfg.percentile)?;
    let labels = labels.reorient_ras().resample_nearest(cfg.target_mm)?;
    Ok((image, labels))
}

/// Slice-level stages on preprocessed volumes: central slice, resize, encode.
pub fn slice_sample(
    image: &Volume<f32>,
    labels: &Volume<i32>,
    cfg: &PipelineConfig,
    patient_id: &str,
    modality: Modality,
) -> Result<SliceSample> {
    let s = cfg.image_size;
    let img = resize_image(&image.central_slice(), s)?.mapv(|v| v.clamp(0.0, 255.0));
    let lab: Array2<i32> = resize_labels(&labels.central_slice(), s)?;
    let classes = cfg.label_map.map_slice(&lab)?;
    let sample = SliceSample {
        image: Tensor::new(&[1, s, s], img.iter().copied().collect())?,
        labels: classes.iter().copied().collect(),
        patient_id: patient_id.to_string(),
        modality,
        fold: None,
        eval_excluded: false,
    };
    sample.validate(s)?;
    Ok(sample)
}

/// The full pipeline for one scan.
pub fn preprocess(image: &ImageVolume, labels: &LabelVolume, cfg: &PipelineConfig) -> Result<SliceSample> {
    let (vi, vl) = preprocess_volumes(&image.volume, &labels.volume, cfg)?;
    slice_sample(&vi, &vl, cfg, &image.patient_id, image.modality)
}

/// Samples plus the patient records they belong to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SliceSample>,
    pub records: Vec<PatientRecord>,
}

impl Dataset {
    pub fn record(&self, patient_id: &str) -> Option<&PatientRecord> {
        self.records.iter().find(|r| r.patient_id == patient_id)
    }

    /// Samples eligible for scoring (oblique scans removed).
    pub fn eval_samples(&self) -> impl Iterator<Item = &SliceSample> {
        self.samples.iter().filter(|s| !s.eval_excluded)
    }

    /// Copies each patient's fold onto its samples.
    pub fn assign_folds(&mut self, folds: &BTreeMap<String, usize>) {
        for s in &mut self.samples {
            s.fold = folds.get(&s.patient_id).copied();
        }
    }
}

/// `(patient id, modality)` parsed from `{id}_{t1|t2}.nii[.gz]`.
pub fn parse_scan_name(path: &Path) -> Option<(String, Modality)> {
    let name = path.file_name()?.to_str()?;
    let stem = name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))?;
    let (id, tag) = stem.rsplit_once('_')?;
    let modality = tag.parse().ok()?;
    (!id.is_empty()).then(|| (id.to_string(), modality))
}

fn find_label(dir: &Path, patient: &str, modality: Modality) -> Option<PathBuf> {
    ["nii.gz", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{patient}_{}.{ext}", modality.tag())))
        .find(|p| p.is_file())
}

/// Scans `image_dir` for `{id}_{t1|t2}.nii[.gz]`, pairs each with its label volume and
/// metadata row, and runs the pipeline on every scan.
pub fn build_dataset(image_dir: &Path, label_dir: &Path, meta_path: &Path, cfg: &PipelineConfig) -> Result<Dataset> {
    cfg.validate()?;
    let records = read_metadata(meta_path)?;
    let entries = std::fs::read_dir(image_dir).map_err(|e| Error::file(image_dir, e))?;
    let mut scans = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::file(image_dir, e))?.path();
        if let Some((id, m)) = parse_scan_name(&path) {
            scans.push((id, m, path));
        }
    }
    scans.sort();
    if scans.is_empty() {
        return Err(Error::Missing(format!("no {{id}}_{{t1|t2}}.nii[.gz] scans in {}", image_dir.display())));
    }
    let results: Vec<Result<SliceSample>> = scans
        .par_iter()
        .map(|(id, m, path)| {
            let record = records
                .iter()
                .find(|r| &r.patient_id == id)
                .ok_or_else(|| Error::file(path, format!("patient {id} has no metadata row")))?;
            let label_path = find_label(label_dir, id, *m)
                .ok_or_else(|| Error::file(path, "no matching label volume"))?;
            let image = ImageVolume {
                volume: nifti_io::read_image(path)?,
                modality: *m,
                patient_id: id.clone(),
            };
            let labels = LabelVolume {
                volume: nifti_io::read_labels(&label_path)?,
                patient_id: id.clone(),
            };
            let mut sample = preprocess(&image, &labels, cfg).map_err(|e| match e {
                e @ Error::File { .. } => e,
                other => Error::file(path, other),
            })?;
            sample.eval_excluded = record.oblique;
            Ok(sample)
        })
        .collect();
    let mut samples = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(s) => samples.push(s),
            Err(e) => failures.push(e),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Inputs(failures));
    }
    Ok(Dataset { samples, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn scan_names() {
        assert_eq!(
            parse_scan_name(Path::new("a/12_t2.nii.gz")),
            Some(("12".to_string(), Modality::T2w))
        );
        assert_eq!(
            parse_scan_name(Path::new("toy_01_t1.nii")),
            Some(("toy_01".to_string(), Modality::T1w))
        );
        assert_eq!(parse_scan_name(Path::new("12_flair.nii")), None);
        assert_eq!(parse_scan_name(Path::new("12_t1.mha")), None);
    }

    #[test]
    fn misaligned_labels_are_rejected() {
        let img = Volume::new(Array3::from_elem((2, 4, 4), 1.0f32), [1.0; 3], RAS).unwrap();
        let lab = Volume::new(Array3::from_elem((2, 4, 5), 0), [1.0; 3], RAS).unwrap();
        assert!(preprocess_volumes(&img, &lab, &PipelineConfig::toy()).is_err());
        let lab = Volume::new(Array3::from_elem((2, 4, 4), 0), [2.0, 1.0, 1.0], RAS).unwrap();
        assert!(preprocess_volumes(&img, &lab, &PipelineConfig::toy()).is_err());
    }

    #[test]
    fn sample_from_small_volume() {
        let img = Volume::new(
            Array3::from_shape_fn((3, 8, 8), |(i, j, k)| (i + j + k) as f32),
            [1.0; 3],
            RAS,
        )
        .unwrap();
        let lab = Volume::new(Array3::from_shape_fn((3, 8, 8), |(_, j, _)| if j < 4 { 0 } else { 3 }), [1.0; 3], RAS)
            .unwrap();
        let cfg = PipelineConfig { image_size: 8, ..PipelineConfig::default() };
        let (vi, vl) = preprocess_volumes(&img, &lab, &cfg).unwrap();
        let s = slice_sample(&vi, &vl, &cfg, "p", Modality::T1w).unwrap();
        assert_eq!(s.labels[..8], [0; 8]);
        assert_eq!(s.labels[63], 2);
        assert!(s.validate(8).is_ok());
    }
}
