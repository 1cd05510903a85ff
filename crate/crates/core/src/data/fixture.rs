//! Synthetic sagittal spine phantoms standing in for real scans in tests and demos.
//!
//! Vertebral bodies are stacked rectangles separated by discs, with the spinal
//! canal as a band behind them. Label codes follow the default [`LabelMap`].

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::labels::Class;
use super::metadata::{write_metadata, Pathology, PatientRecord, DISC_LEVELS};
use super::nifti_io::{write_image, write_labels};
use super::volume::{Orientation, Volume, RAS};
use super::{preprocess, Dataset, ImageVolume, LabelVolume, LabelMap, Modality, PipelineConfig};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// In-plane extent (anterior-posterior and inferior-superior), 1 mm voxels.
    pub size: usize,
    /// Sagittal slice count.
    pub slices: usize,
    pub sagittal_mm: f64,
    pub noise_sigma: f32,
    /// Multiplier from the nominal 0-255 tissue table to stored scanner units.
    pub intensity_scale: f32,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 64,
            slices: 3,
            sagittal_mm: 3.0,
            noise_sigma: 6.0,
            intensity_scale: 4.0,
        }
    }
}

/// Nominal tissue brightness per class: background, canal, body, disc.
fn tissue_table(m: Modality) -> [f32; 4] {
    match m {
        Modality::T1w => [30.0, 60.0, 170.0, 100.0],
        Modality::T2w => [30.0, 220.0, 110.0, 180.0],
    }
}

fn class_of_code(code: i32) -> usize {
    LabelMap::default().class_of(code as i64).map(|c| c.id() as usize).unwrap_or(Class::Background.id() as usize)
}

/// Raw-code sagittal label slice `[Y, Z]` (posterior to anterior, inferior to superior).
pub fn anatomy_slice(size: usize, seed: u64) -> Array2<i32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = size as f64 / 64.0;
    let px = |v: f64| ((v * scale).round() as usize).max(1);
    let canal_y = px(rng.random_range(12.0..18.0));
    let canal_half = px(rng.random_range(2.5..4.0));
    let body_y0 = canal_y + canal_half + px(rng.random_range(2.0..4.0));
    let body_y1 = (body_y0 + px(rng.random_range(18.0..26.0))).min(size - 1);
    let mut out = Array2::zeros((size, size));
    for y in canal_y.saturating_sub(canal_half)..(canal_y + canal_half).min(size) {
        for z in 0..size {
            out[(y, z)] = 100;
        }
    }
    let mut z = px(rng.random_range(0.0..4.0));
    let (mut vert, mut disc) = (1, 201);
    let mut is_body = true;
    while z < size {
        let h = if is_body {
            px(rng.random_range(7.0..11.0))
        } else {
            px(rng.random_range(3.0..5.0))
        };
        let code = if is_body { vert } else { disc };
        for zz in z..(z + h).min(size) {
            for y in body_y0..body_y1 {
                out[(y, zz)] = code;
            }
        }
        if is_body {
            vert += 1;
        } else {
            disc += 1;
        }
        is_body = !is_body;
        z += h;
    }
    out
}

fn patient_seed(seed: u64, patient_id: &str) -> u64 {
    patient_id
        .bytes()
        .fold(seed ^ 0x9e37_79b9_7f4a_7c15, |h, b| h.rotate_left(7) ^ (b as u64).wrapping_mul(0x100_0000_01b3))
}

/// One phantom scan and its labels, stored in `orientation`.
pub fn phantom(
    patient_id: &str,
    modality: Modality,
    seed: u64,
    spec: &PhantomSpec,
    orientation: Orientation,
) -> Result<(ImageVolume, LabelVolume)> {
    let pseed = patient_seed(seed, patient_id);
    let slice = anatomy_slice(spec.size, pseed);
    let table = tissue_table(modality);
    let mut rng = ChaCha8Rng::seed_from_u64(pseed ^ (modality as u64 + 1).wrapping_mul(0xa076_1d64_78bd_642f));
    let noise = Normal::new(0.0f32, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let shape = (spec.slices, spec.size, spec.size);
    let labels = Array3::from_shape_fn(shape, |(_, y, z)| slice[(y, z)]);
    let image = Array3::from_shape_fn(shape, |(_, y, z)| {
        let base = table[class_of_code(slice[(y, z)])];
        ((base + noise.sample(&mut rng)) * spec.intensity_scale).max(0.0)
    });
    let spacing = [spec.sagittal_mm, 1.0, 1.0];
    let image = Volume::new(image, spacing, RAS)?.reorient(orientation);
    let labels = Volume::new(labels, spacing, RAS)?.reorient(orientation);
    Ok((
        ImageVolume {
            volume: image,
            modality,
            patient_id: patient_id.to_string(),
        },
        LabelVolume {
            volume: labels,
            patient_id: patient_id.to_string(),
        },
    ))
}

/// A metadata row with seeded findings.
pub fn phantom_record(patient_id: &str, seed: u64) -> PatientRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(patient_seed(seed, patient_id) ^ 0x5bd1_e995);
    let mut r = PatientRecord::new(patient_id);
    r.sex = if rng.random_bool(0.5) { "F" } else { "M" }.into();
    for p in Pathology::FLAGGED {
        r.findings.insert(p, rng.random_bool(0.3));
    }
    r.pfirrmann = (0..DISC_LEVELS.len()).map(|_| Some(rng.random_range(1..=5))).collect();
    r
}

/// A patient in a generated fixture directory.
#[derive(Debug, Clone)]
pub struct FixturePatient {
    pub id: String,
    pub orientation: Orientation,
    pub modalities: Vec<Modality>,
    pub oblique: bool,
}

/// Layout of the shipped fixture: two patients with both contrasts, one stored LPS.
pub fn default_patients() -> Vec<FixturePatient> {
    vec![
        FixturePatient {
            id: "toy01".into(),
            orientation: RAS,
            modalities: Modality::ALL.to_vec(),
            oblique: false,
        },
        FixturePatient {
            id: "toy02".into(),
            orientation: "LPS".parse().expect("valid code"),
            modalities: Modality::ALL.to_vec(),
            oblique: false,
        },
    ]
}

/// Writes `images/`, `labels/` and `metadata.csv` under `dir`; returns the written scan paths.
pub fn write_fixture(dir: &Path, patients: &[FixturePatient], seed: u64, spec: &PhantomSpec) -> Result<Vec<PathBuf>> {
    let (img_dir, lab_dir) = (dir.join("images"), dir.join("labels"));
    std::fs::create_dir_all(&img_dir)?;
    std::fs::create_dir_all(&lab_dir)?;
    let mut written = Vec::new();
    let mut records = Vec::new();
    for p in patients {
        for &m in &p.modalities {
            let (img, lab) = phantom(&p.id, m, seed, spec, p.orientation)?;
            let name = format!("{}_{}.nii.gz", p.id, m.tag());
            write_image(&img_dir.join(&name), &img.volume)?;
            write_labels(&lab_dir.join(&name), &lab.volume)?;
            written.push(img_dir.join(name));
        }
        let mut rec = phantom_record(&p.id, seed);
        rec.oblique = p.oblique;
        records.push(rec);
    }
    write_metadata(&dir.join("metadata.csv"), &records)?;
    Ok(written)
}

/// Preprocessed in-memory dataset of `n` phantom patients, ids `syn000`, `syn001`, ...
pub fn synthetic_dataset(
    n: usize,
    seed: u64,
    modalities: &[Modality],
    spec: &PhantomSpec,
    cfg: &PipelineConfig,
) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for i in 0..n {
        let id = format!("syn{i:03}");
        for &m in modalities {
            let (img, lab) = phantom(&id, m, seed, spec, RAS)?;
            ds.samples.push(preprocess(&img, &lab, cfg)?);
        }
        ds.records.push(phantom_record(&id, seed));
    }
    Ok(ds)
}
