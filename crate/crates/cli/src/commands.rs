use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, ValueEnum};
use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use spineseg::data::cache::{load_cache, write_cache};
use spineseg::data::fixture::{default_patients, write_fixture, PhantomSpec};
use spineseg::data::nifti_io::{read_image, read_labels, write_array};
use spineseg::data::{build_dataset, read_metadata, Dataset, ModalityFilter, PatientRecord, PipelineConfig, SliceSample, RAS};
use spineseg::diffusion::{NoiseSchedule, ScheduleKind};
use spineseg::ensemble::{run_iisdm_inference, run_spinesegdiff_inference, EnsembleConfig, IisdmConfig};
use spineseg::eval::{
    make_folds, modality_comparison, pathology_analysis, patient_means, structure_dice, write_box_plots,
    write_metrics_csv, write_stats_csv, write_table_one, MetricsRecord, PatientScore, StatsConfig,
};
use spineseg::networks::{ModelKind, ModelParams};
use spineseg::preseg::{
    emit_preseg_masks, preseg_path, read_preseg, refine_from_preseg, run_ablation, validate_grid, write_ablation_csv,
    write_ablation_table, write_preseg_labels, AblationItem, PresegInput,
};
use spineseg::tensor::{argmax_channels, Tensor};
use spineseg::training::{split_samples, train, write_curves_csv, Checkpoint, TrainConfig};
use spineseg::data::labels::Structure;

use crate::manifest::RunManifest;
use crate::{Cli, Command};

/// Bad invocation or missing input, reported with exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn output_dir(explicit: &Option<PathBuf>, command: &str) -> Result<PathBuf> {
    let dir = match explicit {
        Some(d) => d.clone(),
        None => match std::env::var_os("SPINESEG_OUTPUT_DIR") {
            Some(root) => PathBuf::from(root).join(command),
            None => return Err(usage("no --out given and SPINESEG_OUTPUT_DIR is unset")),
        },
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn require_paths(paths: &[&Path]) -> Result<()> {
    let missing: Vec<String> = paths.iter().filter(|p| !p.exists()).map(|p| format!("  {} does not exist", p.display())).collect();
    if !missing.is_empty() {
        return Err(usage(format!("missing inputs:\n{}", missing.join("\n"))));
    }
    Ok(())
}

fn load_structured<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
    } else {
        serde_yaml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
    };
    Ok(v)
}

pub fn run(cli: &Cli, argv: &[String]) -> Result<()> {
    match &cli.command {
        Command::Preprocess(a) => preprocess(a, cli.seed, argv),
        Command::Train(a) => train_cmd(a, cli.seed, argv),
        Command::Infer(a) => infer(a, cli.seed, argv),
        Command::Evaluate(a) => evaluate(a, cli.seed, argv),
        Command::Stats(a) => stats(a, cli.seed, argv),
        Command::Ablate(a) => ablate(a, cli.seed, argv),
        Command::MakeFixture(a) => make_fixture(a, cli.seed, argv),
        Command::Rerun(a) => rerun(a),
    }
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub meta: PathBuf,
    /// Cache directory to write.
    #[arg(long, env = "SPINESEG_CACHE_DIR")]
    pub out: PathBuf,
    /// Pipeline settings (YAML or JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output slice size; overrides the config.
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Number of patient-wise folds to assign.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
}

fn preprocess(a: &PreprocessArgs, seed: u64, argv: &[String]) -> Result<()> {
    let mut inputs = vec![a.images.as_path(), a.labels.as_path(), a.meta.as_path()];
    if let Some(c) = &a.config {
        inputs.push(c);
    }
    require_paths(&inputs)?;
    let mut cfg: PipelineConfig = match &a.config {
        Some(p) => load_structured(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = a.image_size {
        cfg.image_size = s;
    }
    cfg.validate()?;
    let mut ds = build_dataset(&a.images, &a.labels, &a.meta, &cfg)?;
    let folds = match make_folds(&ds.records, a.folds, seed) {
        Ok(f) => {
            ds.assign_folds(&f.assignment());
            Some(f)
        }
        Err(e) => {
            log::warn!("no folds assigned: {e}");
            None
        }
    };
    write_cache(&a.out, &ds)?;
    let folds_path = a.out.join("folds.json");
    std::fs::write(&folds_path, serde_json::to_string_pretty(&folds)?)?;
    let mut m = RunManifest::new("preprocess", argv, seed)?.with_config(&cfg)?;
    for p in inputs {
        m.add_input(p)?;
    }
    m.add_output(&a.out);
    m.write(&a.out)?;
    println!("cached {} samples from {} patients in {}", ds.samples.len(), ds.records.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Full,
    Toy,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: ModelKind,
    #[arg(long)]
    pub modality: Option<ModalityFilter>,
    /// Held-out validation fold; omitted validates on the training scans.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Training configuration (YAML or JSON); overrides the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    pub preset: Preset,
    #[arg(long, env = "SPINESEG_CACHE_DIR")]
    pub cache: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, value_parser = parse_schedule)]
    pub schedule: Option<ScheduleKind>,
}

fn parse_schedule(s: &str) -> std::result::Result<ScheduleKind, String> {
    match s {
        "linear" => Ok(ScheduleKind::Linear),
        "cosine" => Ok(ScheduleKind::Cosine),
        other => Err(format!("unknown schedule {other:?} (linear or cosine)")),
    }
}

/// Resolved training configuration with every problem collected before any compute.
fn resolve_train_config(a: &TrainArgs, seed: u64) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_paths(&[p])?;
            load_structured::<TrainConfig>(p)?
        }
        None => match a.preset {
            Preset::Full => TrainConfig::full_scale(a.model),
            Preset::Toy => TrainConfig::toy(a.model),
        },
    };
    let mut problems = Vec::new();
    if cfg.model != a.model {
        problems.push(format!("config is for {} but --model is {}", cfg.model.as_str(), a.model.as_str()));
    }
    if let Some(m) = a.modality {
        cfg.modality = m;
    }
    if a.fold.is_some() {
        cfg.fold = a.fold;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    if let Some(k) = a.schedule {
        cfg.schedule.kind = k;
    }
    cfg.seed = seed;
    cfg.validation.seed = seed;
    problems.extend(cfg.problems());
    if !problems.is_empty() {
        return Err(usage(format!("invalid training configuration:\n  {}", problems.join("\n  "))));
    }
    Ok(cfg)
}

fn train_cmd(a: &TrainArgs, seed: u64, argv: &[String]) -> Result<()> {
    let cfg = resolve_train_config(a, seed)?;
    let ds = load_cache(&a.cache)?;
    split_samples(&ds, &cfg)?;
    let out = output_dir(&a.out, "train")?;
    let report = train(&ds, &cfg)?;
    let best = out.join("model.ckpt");
    report.best.save(&best)?;
    let last = out.join("final.ckpt");
    Checkpoint { params: report.final_params.clone(), step: report.steps, epoch: report.best.epoch, metric: f64::NAN, config: cfg.clone() }
        .save(&last)?;
    write_curves_csv(&out.join("curves.csv"), &report.curve)?;
    std::fs::write(out.join("config.yaml"), serde_yaml::to_string(&cfg)?)?;
    let summary = serde_json::json!({
        "model": cfg.model,
        "modality": cfg.modality,
        "fold": cfg.fold,
        "steps": report.steps,
        "stopped_early": report.stopped_early,
        "elapsed_secs": report.elapsed_secs,
        "best_step": report.best.step,
        "best_metric": report.best.metric,
        "train_scans": report.train_scans,
        "val_scans": report.val_scans,
        "config_hash": cfg.hash()?,
    });
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    let mut m = RunManifest::new("train", argv, seed)?.with_config(&cfg)?;
    m.add_input(&a.cache)?;
    if let Some(c) = &a.config {
        m.add_input(c)?;
    }
    for f in ["model.ckpt", "final.ckpt", "curves.csv", "config.yaml", "summary.json"] {
        m.add_output(&out.join(f));
    }
    if cfg.model == ModelKind::Unet {
        let pool: Vec<&SliceSample> = ds.samples.iter().filter(|s| cfg.modality.accepts(s.modality)).collect();
        let dir = out.join("preseg");
        emit_preseg_masks(&report.best.params, &pool, &dir)?;
        m.add_output(&dir);
    }
    m.write(&out)?;
    println!(
        "trained {} for {} steps ({:.1}s), best validation {:.4} at step {}",
        cfg.model.as_str(),
        report.steps,
        report.elapsed_secs,
        report.best.metric,
        report.best.step
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A sample cache directory or a single preprocessed `1×H×W` NIfTI slice.
    #[arg(long)]
    pub input: PathBuf,
    /// Restrict a cache input to these scan keys.
    #[arg(long)]
    pub scan: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub samples: usize,
    #[arg(long, default_value_t = 10)]
    pub ddim_steps: usize,
    #[arg(long, default_value_t = 10)]
    pub fuse_last: usize,
    /// Pre-segmentation file (single slice) or directory of `{scan}.nii.gz` files.
    #[arg(long, requires = "noise_t")]
    pub preseg: Option<PathBuf>,
    /// Noising depth applied to the pre-segmentation.
    #[arg(long, requires = "preseg")]
    pub noise_t: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Per-slice inference metadata written next to the label map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceReport {
    pub scan: String,
    pub model: ModelKind,
    pub setting: ModalityFilter,
    pub checkpoint: String,
    pub samples: usize,
    pub ddim_steps: usize,
    pub fuse_last: usize,
    pub noise_t: Option<usize>,
    pub reverse_steps: usize,
    pub seed: u64,
    pub labels: String,
    pub uncertainty: String,
}

struct Slice {
    key: String,
    image: Tensor,
}

fn read_slice_file(path: &Path) -> Result<Slice> {
    let v = read_image(path)?;
    let s = v.shape();
    if s[0] != 1 || s[1] != s[2] {
        return Err(usage(format!("{}: expected a 1×H×H slice, got {:?}", path.display(), s)));
    }
    let name = path.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
    let key = name.trim_end_matches(".gz").trim_end_matches(".nii").to_string();
    Ok(Slice { key, image: Tensor::new(&[1, s[1], s[2]], v.voxels.iter().copied().collect())? })
}

fn write_map(path: &Path, values: &[f32], size: usize) -> Result<()> {
    let a = Array3::from_shape_vec((1, size, size), values.to_vec())?;
    write_array(path, &a, [1.0; 3], RAS, "uncertainty")?;
    Ok(())
}

fn infer(a: &InferArgs, seed: u64, argv: &[String]) -> Result<()> {
    let mut inputs = vec![a.checkpoint.as_path(), a.input.as_path()];
    if let Some(p) = &a.preseg {
        inputs.push(p);
    }
    require_paths(&inputs)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let schedule = ck.config.schedule.build()?;
    let ens = EnsembleConfig { samples: a.samples, ddim_steps: a.ddim_steps, fuse_last: a.fuse_last, seed };
    ens.validate()?;
    let slices: Vec<Slice> = if a.input.is_dir() {
        let ds = load_cache(&a.input)?;
        let wanted: BTreeSet<&String> = a.scan.iter().collect();
        let s: Vec<Slice> = ds
            .samples
            .into_iter()
            .filter(|s| wanted.is_empty() || wanted.contains(&s.key()))
            .map(|s| Slice { key: s.key(), image: s.image })
            .collect();
        if s.is_empty() {
            return Err(usage(format!("no matching scans in {}", a.input.display())));
        }
        s
    } else {
        vec![read_slice_file(&a.input)?]
    };
    let size = ck.params.descriptor().image_size;
    if let Some(s) = slices.iter().find(|s| s.image.shape()[1] != size) {
        return Err(usage(format!("slice {} is {} pixels wide but the model expects {size}", s.key, s.image.shape()[1])));
    }
    let out = output_dir(&a.out, "infer")?;
    let reports: Vec<SliceReport> = slices
        .par_iter()
        .map(|s| infer_slice(&ck, &schedule, &ens, a, s, &out))
        .collect::<Result<_>>()?;
    let mut m = RunManifest::new("infer", argv, seed)?.with_config(&ens)?;
    for p in inputs {
        m.add_input(p)?;
    }
    for r in &reports {
        m.add_output(&out.join(&r.labels));
        m.add_output(&out.join(&r.uncertainty));
    }
    m.write(&out)?;
    println!("segmented {} slice(s) into {}", reports.len(), out.display());
    Ok(())
}

fn infer_slice(ck: &Checkpoint, schedule: &NoiseSchedule, ens: &EnsembleConfig, a: &InferArgs, s: &Slice, out: &Path) -> Result<SliceReport> {
    let params: &ModelParams = &ck.params;
    let size = s.image.shape()[1];
    let hw = size * size;
    let (labels, uncertainty, reverse_steps) = match (&a.preseg, a.noise_t) {
        (Some(p), Some(t)) => {
            if params.descriptor().kind != ModelKind::SpineSegDiff {
                return Err(usage("pre-segmentation refinement needs a spinesegdiff checkpoint"));
            }
            let path = if p.is_dir() { preseg_path(p, &s.key) } else { p.clone() };
            let pre: PresegInput = read_preseg(&path, params.descriptor().classes, size, &s.key)?;
            let r = refine_from_preseg(params, &s.image, &pre, t, schedule, ens)?;
            let u = r.uncertainty_map();
            (r.label_map, u, r.reverse_steps)
        }
        _ => match params.descriptor().kind {
            ModelKind::SpineSegDiff => {
                let r = run_spinesegdiff_inference(params, &s.image, schedule, ens)?;
                let u = r.uncertainty_map();
                (r.label_map, u, r.reverse_steps)
            }
            ModelKind::Iisdm => {
                let c = IisdmConfig { samples: ens.samples, ddim_steps: ens.ddim_steps, seed: ens.seed };
                let r = run_iisdm_inference(params, &s.image, schedule, &c)?;
                let u = r.variance_map();
                (r.label_map, u, r.reverse_steps)
            }
            ModelKind::Unet => (argmax_channels(&params.segment(&s.image)?)?, vec![0.0; hw], 0),
        },
    };
    let labels_name = format!("{}_labels.nii.gz", s.key);
    let unc_name = format!("{}_uncertainty.nii.gz", s.key);
    write_preseg_labels(&out.join(&labels_name), &labels, size)?;
    write_map(&out.join(&unc_name), &uncertainty, size)?;
    let report = SliceReport {
        scan: s.key.clone(),
        model: params.descriptor().kind,
        setting: ck.config.modality,
        checkpoint: a.checkpoint.display().to_string(),
        samples: ens.samples,
        ddim_steps: ens.ddim_steps,
        fuse_last: ens.fuse_last,
        noise_t: a.noise_t,
        reverse_steps,
        seed: ens.seed,
        labels: labels_name,
        uncertainty: unc_name,
    };
    std::fs::write(out.join(format!("{}.json", s.key)), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, env = "SPINESEG_CACHE_DIR")]
    pub cache: PathBuf,
    /// Inference output directories, one per (model, modality setting) cell.
    #[arg(long, required = true, num_args = 1..)]
    pub predictions: Vec<PathBuf>,
    /// Models expected in the table; defaults to those found.
    #[arg(long, value_delimiter = ',')]
    pub models: Vec<ModelKind>,
    /// Modality settings expected in the table; defaults to those found.
    #[arg(long, value_delimiter = ',')]
    pub settings: Vec<ModalityFilter>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn read_reports(dir: &Path) -> Result<Vec<SliceReport>> {
    if !dir.is_dir() {
        return Err(usage(format!("{} is not a prediction directory", dir.display())));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json") && p.file_name().is_some_and(|n| n != crate::manifest::MANIFEST_FILE))
        .collect();
    paths.sort();
    let reports = paths
        .iter()
        .map(|p| -> Result<SliceReport> {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    if reports.is_empty() {
        return Err(spineseg::Error::Missing(format!("no predictions in {}", dir.display())).into());
    }
    Ok(reports)
}

fn score_predictions(dir: &Path, reports: &[SliceReport], ds: &Dataset) -> Result<Vec<PatientScore>> {
    let by_key: BTreeMap<String, &SliceSample> = ds.samples.iter().map(|s| (s.key(), s)).collect();
    let mut scores = Vec::new();
    for r in reports {
        let s = by_key
            .get(&r.scan)
            .ok_or_else(|| usage(format!("prediction {} has no scan in the cache", r.scan)))?;
        if s.eval_excluded {
            log::info!("{} is excluded from evaluation", r.scan);
            continue;
        }
        let v = read_labels(&dir.join(&r.labels))?;
        let pred: Vec<u8> = v.voxels.iter().map(|&c| c as u8).collect();
        for (structure, dice) in structure_dice(&pred, &s.labels)? {
            scores.push(PatientScore { patient: s.patient_id.clone(), modality: s.modality, structure, dice });
        }
    }
    Ok(scores)
}

fn evaluate(a: &EvaluateArgs, seed: u64, argv: &[String]) -> Result<()> {
    let mut paths: Vec<&Path> = vec![a.cache.as_path()];
    paths.extend(a.predictions.iter().map(|p| p.as_path()));
    require_paths(&paths)?;
    let ds = load_cache(&a.cache)?;
    let out = output_dir(&a.out, "evaluate")?;
    let metrics_dir = out.join("metrics");
    std::fs::create_dir_all(&metrics_dir)?;
    let mut cells = Vec::new();
    let mut seen = BTreeSet::new();
    let mut m = RunManifest::new("evaluate", argv, seed)?;
    for dir in &a.predictions {
        let reports = read_reports(dir)?;
        let (model, setting) = (reports[0].model, reports[0].setting);
        if reports.iter().any(|r| r.model != model || r.setting != setting) {
            return Err(usage(format!("{} mixes predictions from different models or settings", dir.display())));
        }
        if !seen.insert((model.as_str(), setting.as_str())) {
            return Err(usage(format!("two prediction directories for {}/{}", model.as_str(), setting.as_str())));
        }
        let scores = score_predictions(dir, &reports, &ds)?;
        let path = metrics_dir.join(format!("{}_{}.csv", model.as_str(), setting.as_str()));
        write_metrics_csv(&path, &scores)?;
        m.add_output(&path);
        m.add_input(dir)?;
        let means = patient_means(&scores);
        for s in Structure::ALL {
            cells.push(MetricsRecord {
                model,
                modality: setting,
                structure: s,
                dice: means.iter().filter(|((_, st), _)| *st == s).map(|(_, &d)| d).collect(),
            });
        }
    }
    let models: Vec<ModelKind> = if a.models.is_empty() {
        let mut v: Vec<ModelKind> = Vec::new();
        for c in &cells {
            if !v.contains(&c.model) {
                v.push(c.model);
            }
        }
        v
    } else {
        a.models.clone()
    };
    let settings: Vec<ModalityFilter> = if a.settings.is_empty() {
        cells.iter().map(|c| c.modality).collect::<BTreeSet<_>>().into_iter().collect()
    } else {
        a.settings.clone()
    };
    let rows = modality_comparison(&cells, &models, &settings, &Structure::ALL)?;
    let table = out.join("table1.csv");
    write_table_one(&table, &rows)?;
    std::fs::write(out.join("table1.json"), serde_json::to_string_pretty(&rows)?)?;
    m.add_output(&table);
    m.add_input(&a.cache)?;
    m.config = serde_json::json!({ "models": models, "settings": settings });
    m.write(&out)?;
    println!("wrote {} table rows to {}", rows.len(), table.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Metrics CSV with columns patient, modality, structure, dice.
    #[arg(long)]
    pub metrics: PathBuf,
    /// Patient metadata: a metadata CSV or a cache `records.json`.
    #[arg(long)]
    pub meta: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Minimum Pfirrmann grade counted as disc degeneration.
    #[arg(long, default_value_t = 4)]
    pub degeneration_grade: u8,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn read_records(path: &Path) -> Result<Vec<PatientRecord>> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?)
    } else {
        Ok(read_metadata(path)?)
    }
}

fn stats(a: &StatsArgs, seed: u64, argv: &[String]) -> Result<()> {
    require_paths(&[&a.metrics, &a.meta])?;
    let scores = spineseg::eval::read_metrics_csv(&a.metrics)?;
    if scores.is_empty() {
        return Err(spineseg::Error::Missing(format!("{} holds no scores", a.metrics.display())).into());
    }
    let records = read_records(&a.meta)?;
    let cfg = StatsConfig { alpha: a.alpha, degeneration_grade: a.degeneration_grade, ..StatsConfig::default() };
    let report = pathology_analysis(&scores, &records, &cfg)?;
    let out = output_dir(&a.out, "stats")?;
    write_stats_csv(&out.join("stats.csv"), &report.results)?;
    let skipped: Vec<serde_json::Value> = report
        .skipped
        .iter()
        .map(|(p, s, why)| serde_json::json!({ "pathology": p, "structure": s, "reason": why }))
        .collect();
    let json = serde_json::json!({ "config": cfg, "results": report.results, "skipped": skipped });
    std::fs::write(out.join("stats.json"), serde_json::to_string_pretty(&json)?)?;
    let figures = write_box_plots(&out.join("figures"), &report)?;
    let mut m = RunManifest::new("stats", argv, seed)?.with_config(&cfg)?;
    m.add_input(&a.metrics)?;
    m.add_input(&a.meta)?;
    m.add_output(&out.join("stats.csv"));
    m.add_output(&out.join("stats.json"));
    for f in &figures {
        m.add_output(f);
    }
    m.write(&out)?;
    let sig = report.results.iter().filter(|r| r.significant).count();
    println!("{} tests, {} significant after correction, {} skipped", report.results.len(), sig, report.skipped.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = "SPINESEG_CACHE_DIR")]
    pub cache: PathBuf,
    /// Directory of `{scan}.nii.gz` pre-segmentations.
    #[arg(long)]
    pub preseg: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,30,100,300,500,1000")]
    pub grid: Vec<usize>,
    #[arg(long)]
    pub scan: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub samples: usize,
    #[arg(long, default_value_t = 10)]
    pub ddim_steps: usize,
    #[arg(long, default_value_t = 10)]
    pub fuse_last: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn ablate(a: &AblateArgs, seed: u64, argv: &[String]) -> Result<()> {
    require_paths(&[&a.checkpoint, &a.cache, &a.preseg])?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    if ck.params.descriptor().kind != ModelKind::SpineSegDiff {
        return Err(usage("the ablation needs a spinesegdiff checkpoint"));
    }
    let schedule = ck.config.schedule.build()?;
    validate_grid(&a.grid, schedule.steps())?;
    let ens = EnsembleConfig { samples: a.samples, ddim_steps: a.ddim_steps, fuse_last: a.fuse_last, seed };
    ens.validate()?;
    let ds = load_cache(&a.cache)?;
    let wanted: BTreeSet<&String> = a.scan.iter().collect();
    let d = ck.params.descriptor();
    let mut items = Vec::new();
    let mut missing = Vec::new();
    for s in ds.eval_samples().filter(|s| ck.config.modality.accepts(s.modality)) {
        if !wanted.is_empty() && !wanted.contains(&s.key()) {
            continue;
        }
        match read_preseg(&preseg_path(&a.preseg, &s.key()), d.classes, s.size(), &s.key()) {
            Ok(pre) => items.push(AblationItem { image: s.image.clone(), truth: s.labels.clone(), preseg: pre }),
            Err(e) => missing.push(e),
        }
    }
    if !missing.is_empty() {
        return Err(spineseg::Error::Inputs(missing).into());
    }
    let grid = run_ablation(&ck.params, &items, &a.grid, &schedule, &ens)?;
    let out = output_dir(&a.out, "ablate")?;
    write_ablation_csv(&out.join("ablation.csv"), &grid)?;
    write_ablation_table(&out.join("ablation_table.csv"), &grid)?;
    let json = serde_json::json!({ "checkpoint": a.checkpoint, "slices": items.len(), "sampler": ens, "grid": grid });
    std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&json)?)?;
    let mut m = RunManifest::new("ablate", argv, seed)?.with_config(&ens)?;
    m.add_input(&a.checkpoint)?;
    m.add_input(&a.cache)?;
    m.add_input(&a.preseg)?;
    for f in ["ablation.csv", "ablation_table.csv", "ablation.json"] {
        m.add_output(&out.join(f));
    }
    m.write(&out)?;
    println!("ablated {} slice(s) over t = {:?}", items.len(), a.grid);
    Ok(())
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// In-plane size of each phantom slice.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Number of sagittal slices per volume.
    #[arg(long, default_value_t = 3)]
    pub slices: usize,
}

fn make_fixture(a: &FixtureArgs, seed: u64, argv: &[String]) -> Result<()> {
    let spec = PhantomSpec { size: a.size, slices: a.slices, ..PhantomSpec::default() };
    let written = write_fixture(&a.out, &default_patients(), seed, &spec)?;
    let mut m = RunManifest::new("make-fixture", argv, seed)?;
    m.config = serde_json::json!({ "size": a.size, "slices": a.slices });
    for p in &written {
        m.add_output(p);
    }
    m.write(&a.out)?;
    println!("wrote {} scans to {}", written.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Replay even when recorded inputs have changed.
    #[arg(long)]
    pub force: bool,
}

fn rerun(a: &RerunArgs) -> Result<()> {
    require_paths(&[&a.manifest])?;
    let m = RunManifest::load(&a.manifest)?;
    std::env::set_current_dir(&m.working_dir).with_context(|| format!("entering {}", m.working_dir.display()))?;
    let changed = m.changed_inputs();
    if !changed.is_empty() && !a.force {
        return Err(usage(format!("inputs changed since the recorded run:\n  {}", changed.join("\n  "))));
    }
    let mut args = vec!["spineseg".to_string()];
    args.extend(m.argv.iter().cloned());
    let cli = Cli::try_parse_from(&args).map_err(|e| usage(format!("manifest arguments no longer parse: {e}")))?;
    if matches!(cli.command, Command::Rerun(_)) {
        return Err(usage("a manifest cannot replay another rerun"));
    }
    run(&cli, &m.argv)
}
