//! Refinement of an external pre-segmentation: the mask is partially noised to a
//! shallow timestep and denoised with a few DDIM steps, then fused as usual.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::nifti_io::{read_labels, write_labels};
use crate::data::{SliceSample, Structure, Volume, RAS};
use crate::diffusion::{forward_noise, scale_mask, NoiseSchedule, TimestepSubsequence};
use crate::ensemble::{chain_noise, sample_chains, EnsembleConfig, EnsemblePrediction};
use crate::error::{Error, Result};
use crate::eval::{dice_score, mean_std};
use crate::networks::ModelParams;
use crate::tensor::{argmax_channels, one_hot, Tensor};

pub const DEFAULT_GRID: [usize; 6] = [0, 30, 100, 300, 500, 1000];

/// One-hot `[C, H, W]` mask from an external segmenter.
#[derive(Debug, Clone, PartialEq)]
pub struct PresegInput {
    pub mask: Tensor,
    pub source: String,
    /// Key of the slice the mask belongs to.
    pub scan: String,
}

impl PresegInput {
    pub fn from_labels(labels: &[u8], classes: usize, size: usize, source: &str, scan: &str) -> Result<Self> {
        if labels.len() != size * size {
            return Err(Error::shape(&[size * size], &[labels.len()]));
        }
        Ok(PresegInput {
            mask: one_hot(labels, classes, size, size)?,
            source: source.into(),
            scan: scan.into(),
        })
    }

    pub fn label_map(&self) -> Vec<u8> {
        argmax_channels(&self.mask).expect("3-d mask")
    }

    /// One-hot per pixel and spatially matching the `[1, H, W]` image.
    pub fn validate(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = self.mask.dims3()?;
        let (_, ih, iw) = image.dims3()?;
        if (h, w) != (ih, iw) {
            return Err(Error::shape(&[c, ih, iw], self.mask.shape()));
        }
        let hw = h * w;
        let d = self.mask.data();
        for p in 0..hw {
            let (mut ones, mut other) = (0, 0);
            for k in 0..c {
                match d[k * hw + p] {
                    1.0 => ones += 1,
                    0.0 => {}
                    _ => other += 1,
                }
            }
            if ones != 1 || other != 0 {
                return Err(Error::InvalidRange(format!("pre-segmentation {} is not one-hot at pixel {p}", self.scan)));
            }
        }
        Ok(())
    }
}

/// Refines `x_pre` from noising depth `t_noise` (0 returns the input unchanged).
pub fn refine_from_preseg(
    params: &ModelParams,
    y: &Tensor,
    x_pre: &PresegInput,
    t_noise: usize,
    schedule: &NoiseSchedule,
    config: &EnsembleConfig,
) -> Result<EnsemblePrediction> {
    config.validate()?;
    x_pre.validate(y)?;
    if t_noise > schedule.steps() {
        return Err(Error::InvalidRange(format!("noising depth {t_noise} outside [0, {}]", schedule.steps())));
    }
    if t_noise == 0 {
        let p = x_pre.mask.clone().reshape(&[1, x_pre.mask.shape()[0], x_pre.mask.shape()[1], x_pre.mask.shape()[2]])?;
        return Ok(EnsemblePrediction {
            per_step_uncertainty: Tensor::zeros(p.shape()),
            per_step_mean_probs: p,
            fused: x_pre.mask.clone(),
            label_map: x_pre.label_map(),
            reverse_steps: 0,
        });
    }
    let steps = TimestepSubsequence::new(t_noise, config.ddim_steps.min(t_noise))?;
    let start = preseg_initial_states(&x_pre.mask, t_noise, schedule, config)?;
    sample_chains(params, y, schedule, &steps, &start, config.fuse_last.min(steps.count()))
}

/// Partially noised starting states, one per chain, at timestep index `t_noise - 1`.
pub fn preseg_initial_states(
    mask: &Tensor,
    t_noise: usize,
    schedule: &NoiseSchedule,
    config: &EnsembleConfig,
) -> Result<Vec<Tensor>> {
    if t_noise == 0 {
        return Err(Error::InvalidRange("noising depth must be positive".into()));
    }
    let x0 = scale_mask(mask);
    (0..config.samples)
        .map(|s| forward_noise(&x0, t_noise - 1, &chain_noise(config.seed, s, mask.shape()), schedule))
        .collect()
}

/// Replaces exactly `round(fraction · n)` distinct pixels with a different random class.
pub fn corrupt_labels(labels: &[u8], classes: u8, fraction: f64, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = ((fraction.clamp(0.0, 1.0)) * labels.len() as f64).round() as usize;
    let mut out = labels.to_vec();
    for i in sample(&mut rng, labels.len(), k) {
        let shift = rng.random_range(1..classes);
        out[i] = (out[i] + shift) % classes;
    }
    out
}

/// One slice of the ablation set.
#[derive(Debug, Clone)]
pub struct AblationItem {
    pub image: Tensor,
    pub truth: Vec<u8>,
    pub preseg: PresegInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub t: usize,
    pub structure: Structure,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub n: usize,
    pub reverse_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub t_values: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

impl AblationGrid {
    pub fn row(&self, t: usize, s: Structure) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.t == t && r.structure == s)
    }
}

pub fn validate_grid(grid: &[usize], total_steps: usize) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("ablation grid {grid:?} must be strictly ascending")));
    }
    if let Some(t) = grid.iter().find(|&&t| t > total_steps) {
        return Err(Error::Config(format!("noising depth {t} exceeds the schedule length {total_steps}")));
    }
    Ok(())
}

/// Dice per structure for every noising depth in `grid`.
pub fn run_ablation(
    params: &ModelParams,
    items: &[AblationItem],
    grid: &[usize],
    schedule: &NoiseSchedule,
    config: &EnsembleConfig,
) -> Result<AblationGrid> {
    validate_grid(grid, schedule.steps())?;
    if items.is_empty() {
        return Err(Error::Missing("no slices with pre-segmentations to ablate".into()));
    }
    let mut rows = Vec::new();
    for &t in grid {
        let results: Vec<(BTreeMap<Structure, f64>, usize)> = items
            .par_iter()
            .map(|it| {
                let pred = refine_from_preseg(params, &it.image, &it.preseg, t, schedule, config)?;
                let scores = Structure::ALL
                    .iter()
                    .map(|&s| Ok((s, dice_score(&pred.label_map, &it.truth, s.class_id())?)))
                    .collect::<Result<BTreeMap<_, _>>>()?;
                Ok((scores, pred.reverse_steps))
            })
            .collect::<Result<_>>()?;
        for s in Structure::ALL {
            let v: Vec<f64> = results.iter().map(|r| r.0[&s]).collect();
            let (m, sd) = mean_std(&v);
            rows.push(AblationRow {
                t,
                structure: s,
                dice_mean: m,
                dice_std: sd,
                n: v.len(),
                reverse_steps: results[0].1,
            });
        }
    }
    Ok(AblationGrid { t_values: grid.to_vec(), rows })
}

/// Long format: `t,structure,dice_mean,dice_std`.
pub fn write_ablation_csv(path: &Path, grid: &AblationGrid) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
    w.write_record(["t", "structure", "dice_mean", "dice_std"])?;
    for r in &grid.rows {
        w.write_record([r.t.to_string(), r.structure.to_string(), format!("{:.4}", r.dice_mean), format!("{:.4}", r.dice_std)])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per `t`, mean and std columns per structure.
pub fn write_ablation_table(path: &Path, grid: &AblationGrid) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
    let mut header = vec!["t".to_string()];
    for s in Structure::ALL {
        header.push(format!("{s}_mean"));
        header.push(format!("{s}_std"));
    }
    w.write_record(&header)?;
    for &t in &grid.t_values {
        let mut rec = vec![t.to_string()];
        for s in Structure::ALL {
            let r = grid.row(t, s).ok_or_else(|| Error::Missing(format!("no ablation row for t={t} {s}")))?;
            rec.push(format!("{:.4}", r.dice_mean));
            rec.push(format!("{:.4}", r.dice_std));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Path of the pre-segmentation file for a scan key inside `dir`.
pub fn preseg_path(dir: &Path, scan: &str) -> PathBuf {
    dir.join(format!("{scan}.nii.gz"))
}

/// Writes class ids as a `1 × H × W` integer NIfTI volume.
pub fn write_preseg_labels(path: &Path, labels: &[u8], size: usize) -> Result<()> {
    if labels.len() != size * size {
        return Err(Error::shape(&[size * size], &[labels.len()]));
    }
    let voxels = Array3::from_shape_vec((1, size, size), labels.iter().map(|&v| v as i32).collect())
        .map_err(|e| Error::InvalidRange(e.to_string()))?;
    write_labels(path, &Volume::new(voxels, [1.0; 3], RAS)?)
}

/// Reads a pre-segmentation written by [`write_preseg_labels`] or any co-registered
/// `1 × H × W` class-id volume.
pub fn read_preseg(path: &Path, classes: usize, size: usize, scan: &str) -> Result<PresegInput> {
    if !path.is_file() {
        return Err(Error::Missing(format!("no pre-segmentation for {scan} at {}", path.display())));
    }
    let v = read_labels(path)?;
    if v.shape() != [1, size, size] {
        return Err(Error::file(path, format!("expected a 1×{size}×{size} label slice, got {:?}", v.shape())));
    }
    let labels: Vec<u8> = v.voxels.iter().map(|&c| c as u8).collect();
    if let Some(c) = v.voxels.iter().find(|&&c| c as usize >= classes) {
        return Err(Error::file(path, format!("class id {c} outside [0, {classes})")));
    }
    PresegInput::from_labels(&labels, classes, size, &path.display().to_string(), scan)
}

/// Segments every scan with a plain UNet and writes its class ids under `dir`.
pub fn emit_preseg_masks(params: &ModelParams, samples: &[&SliceSample], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    samples
        .iter()
        .map(|s| {
            let labels = argmax_channels(&params.segment(&s.image)?)?;
            let path = preseg_path(dir, &s.key());
            write_preseg_labels(&path, &labels, s.size())?;
            Ok(path)
        })
        .collect()
}
