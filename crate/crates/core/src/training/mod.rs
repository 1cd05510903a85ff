//! Training loops for the direct-mask diffusion model, the noise-predicting
//! baseline and the plain pre-segmentation UNet.

pub mod checkpoint;
pub mod optim;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::Checkpoint;
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

use crate::autodiff::Graph;
use crate::data::{Dataset, ModalityFilter, SliceSample, Structure};
use crate::diffusion::{forward_noise, sample_timestep, scale_mask, NoiseSchedule, ScheduleConfig};
use crate::ensemble::{predict_label_map, EnsembleConfig};
use crate::error::{Error, Result};
use crate::eval::dice_score;
use crate::losses::{composite_loss_with_grad, dice_loss_on_logits, mse_grad, mse_loss, LossBreakdown};
use crate::networks::{scale_image, ArchDescriptor, ModelKind, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// MSE + Dice + BCE on the predicted mask.
    Composite,
    /// MSE on the predicted noise.
    Mse,
    Dice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchPreset {
    Full,
    Small,
}

/// Validation score used for model selection and early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    Dice,
    /// Positive predictive value.
    Precision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub arch: ArchPreset,
    pub image_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; overrides `epochs` when set.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossKind,
    pub schedule: ScheduleConfig,
    pub modality: ModalityFilter,
    /// Held-out fold; `None` validates on the training scans themselves.
    #[serde(default)]
    pub fold: Option<usize>,
    pub seed: u64,
    pub grad_clip: f64,
    /// Validate every this many optimizer steps (and once at the end).
    pub val_every: usize,
    /// Sampler settings used when validating diffusion models.
    pub validation: EnsembleConfig,
    pub selection: SelectionMetric,
    /// Stop once the validation score exceeds this value.
    #[serde(default)]
    pub stop_at: Option<f64>,
    /// Noise model only: also require held-out noise MSE below this value before stopping.
    #[serde(default)]
    pub stop_at_noise_mse: Option<f64>,
}

impl TrainConfig {
    /// Full-scale hyperparameters.
    pub fn full_scale(model: ModelKind) -> Self {
        let (epochs, batch_size, optimizer, loss) = match model {
            ModelKind::SpineSegDiff => (2500, 4, OptimizerConfig::adamw(1e-4), LossKind::Composite),
            ModelKind::Iisdm => (2600, 10, OptimizerConfig::adamw(1e-4), LossKind::Mse),
            ModelKind::Unet => (250, 197, OptimizerConfig::sgd(0.01), LossKind::Dice),
        };
        TrainConfig {
            model,
            arch: ArchPreset::Full,
            image_size: 320,
            epochs,
            max_steps: None,
            batch_size,
            optimizer,
            loss,
            schedule: ScheduleConfig::default(),
            modality: ModalityFilter::Both,
            fold: None,
            seed: 42,
            grad_clip: 1.0,
            val_every: 500,
            validation: EnsembleConfig::default(),
            selection: SelectionMetric::Dice,
            stop_at: None,
            stop_at_noise_mse: None,
        }
    }

    /// Desk-scale preset for the 64×64 synthetic fixture.
    pub fn toy(model: ModelKind) -> Self {
        TrainConfig {
            arch: ArchPreset::Small,
            image_size: 64,
            epochs: 2000,
            max_steps: Some(2000),
            batch_size: 4,
            optimizer: OptimizerConfig::adamw(1e-3),
            val_every: 50,
            validation: EnsembleConfig {
                samples: 1,
                fuse_last: 1,
                ddim_steps: 2,
                seed: 42,
            },
            stop_at: (model != ModelKind::Iisdm).then_some(0.95),
            stop_at_noise_mse: (model == ModelKind::Iisdm).then_some(0.04),
            ..Self::full_scale(model)
        }
    }

    pub fn descriptor(&self) -> ArchDescriptor {
        let base = match self.arch {
            ArchPreset::Full => ArchDescriptor::full(self.model),
            ArchPreset::Small => ArchDescriptor::small(self.model),
        };
        ArchDescriptor {
            image_size: self.image_size,
            ..base
        }
    }

    /// Every problem with the configuration, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epochs == 0 && self.max_steps.is_none() {
            out.push("epochs must be positive".into());
        }
        if self.max_steps == Some(0) {
            out.push("max_steps must be positive".into());
        }
        if self.batch_size == 0 {
            out.push("batch_size must be positive".into());
        }
        if self.val_every == 0 {
            out.push("val_every must be positive".into());
        }
        if !(self.grad_clip > 0.0) {
            out.push("grad_clip must be positive".into());
        }
        let expected = match self.model {
            ModelKind::SpineSegDiff => LossKind::Composite,
            ModelKind::Iisdm => LossKind::Mse,
            ModelKind::Unet => LossKind::Dice,
        };
        if self.loss != expected {
            out.push(format!("{} trains with the {expected:?} loss, got {:?}", self.model.as_str(), self.loss));
        }
        for r in [
            self.optimizer.validate(),
            self.descriptor().validate(),
            self.schedule.build().map(|_| ()),
            self.validation.validate(),
        ] {
            if let Err(e) = r {
                out.push(e.to_string());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Inputs(p.into_iter().map(Error::Config).collect()))
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        let cfg: TrainConfig = if is_json {
            serde_json::from_str(&text).map_err(|e| Error::file(path, e))?
        } else {
            serde_yaml::from_str(&text).map_err(|e| Error::file(path, e))?
        };
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub mse: f64,
    pub dice: f64,
    pub bce: f64,
    pub grad_norm: f64,
    pub val_metric: Option<f64>,
    pub val_noise_mse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Snapshot with the best validation score.
    pub best: Checkpoint,
    pub final_params: ModelParams,
    pub curve: Vec<CurvePoint>,
    pub steps: usize,
    pub stopped_early: bool,
    pub elapsed_secs: f64,
    pub train_scans: usize,
    pub val_scans: usize,
}

impl TrainReport {
    pub fn last_validation(&self) -> Option<&CurvePoint> {
        self.curve.iter().rev().find(|c| c.val_metric.is_some())
    }
}

pub fn write_curves_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
    w.write_record(["step", "epoch", "loss", "mse", "dice", "bce", "grad_norm", "val_metric", "val_noise_mse"])?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    for c in curve {
        w.write_record([
            c.step.to_string(),
            c.epoch.to_string(),
            format!("{:.6}", c.loss),
            format!("{:.6}", c.mse),
            format!("{:.6}", c.dice),
            format!("{:.6}", c.bce),
            format!("{:.6}", c.grad_norm),
            opt(c.val_metric),
            opt(c.val_noise_mse),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Training and validation scans for a configuration.
pub fn split_samples<'a>(ds: &'a Dataset, cfg: &TrainConfig) -> Result<(Vec<&'a SliceSample>, Vec<&'a SliceSample>)> {
    let pool: Vec<&SliceSample> = ds.samples.iter().filter(|s| cfg.modality.accepts(s.modality)).collect();
    if let Some(s) = pool.iter().find(|s| s.size() != cfg.image_size) {
        return Err(Error::Config(format!(
            "scan {} is {}×{} but the model expects {}",
            s.key(),
            s.size(),
            s.size(),
            cfg.image_size
        )));
    }
    let (train, val): (Vec<_>, Vec<_>) = match cfg.fold {
        None => (pool.clone(), pool.iter().copied().filter(|s| !s.eval_excluded).collect()),
        Some(f) => (
            pool.iter().copied().filter(|s| s.fold != Some(f)).collect(),
            pool.iter().copied().filter(|s| s.fold == Some(f) && !s.eval_excluded).collect(),
        ),
    };
    if train.is_empty() {
        return Err(Error::Missing(format!("no training scans for modality {}", cfg.modality.as_str())));
    }
    if val.is_empty() {
        return Err(Error::Missing(format!("no validation scans for fold {:?}", cfg.fold)));
    }
    Ok((train, val))
}

/// Endless reshuffled index stream.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    seen: usize,
}

impl BatchSampler {
    fn new(n: usize) -> Self {
        BatchSampler { order: (0..n).collect(), pos: n, seen: 0 }
    }

    fn next(&mut self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..batch)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.seen += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }

    fn epoch(&self) -> usize {
        self.seen / self.order.len()
    }
}

/// Mean over structures of per-structure Dice or precision for one scan.
pub fn scan_score(pred: &[u8], truth: &[u8], metric: SelectionMetric) -> Result<f64> {
    let mut total = 0.0;
    for s in Structure::ALL {
        total += match metric {
            SelectionMetric::Dice => dice_score(pred, truth, s.class_id())?,
            SelectionMetric::Precision => precision(pred, truth, s.class_id()),
        };
    }
    Ok(total / Structure::ALL.len() as f64)
}

fn precision(pred: &[u8], truth: &[u8], class_id: u8) -> f64 {
    let (mut tp, mut pp, mut tt) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        pp += (p == class_id) as usize;
        tt += (t == class_id) as usize;
        tp += (p == class_id && t == class_id) as usize;
    }
    match (pp, tt) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => tp as f64 / pp as f64,
    }
}

/// Mean validation score over scans.
pub fn validation_score(
    params: &ModelParams,
    samples: &[&SliceSample],
    schedule: &NoiseSchedule,
    sampler: &EnsembleConfig,
    metric: SelectionMetric,
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let pred = predict_label_map(params, &s.image, schedule, sampler)?;
        total += scan_score(&pred, &s.labels, metric)?;
    }
    Ok(total / samples.len() as f64)
}

/// Noise-prediction MSE on fresh noise draws, `draws` random timesteps per scan.
pub fn noise_mse(
    params: &ModelParams,
    samples: &[&SliceSample],
    schedule: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if params.descriptor().kind != ModelKind::Iisdm {
        return Err(Error::Config("noise MSE needs a noise-prediction model".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        let image = scale_image(&s.image);
        let x0 = scale_mask(&s.mask());
        let mut xs = Vec::with_capacity(draws);
        let mut eps = Vec::with_capacity(draws);
        let mut ts = Vec::with_capacity(draws);
        for _ in 0..draws {
            let t = sample_timestep(&mut rng, schedule.steps());
            let e = Tensor::randn(x0.shape(), &mut rng);
            xs.push(forward_noise(&x0, t, &e, schedule)?);
            eps.push(e);
            ts.push(t);
        }
        let images = Tensor::stack(&vec![image; draws])?;
        let mut g = Graph::inference();
        let out = params.forward(&mut g, Some(&Tensor::stack(&xs)?), &ts, &images)?;
        total += mse_loss(g.value(out), &Tensor::stack(&eps)?)?;
        count += 1;
    }
    Ok(total / count as f64)
}

struct StepOutcome {
    loss: LossBreakdown,
    grad_norm: f64,
}

fn train_step(
    params: &mut ModelParams,
    opt: &mut Optimizer,
    batch: &[&SliceSample],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<StepOutcome> {
    let images = Tensor::stack(&batch.iter().map(|s| scale_image(&s.image)).collect::<Vec<_>>())?;
    let masks = Tensor::stack(&batch.iter().map(|s| s.mask()).collect::<Vec<_>>())?;
    let mut g = Graph::new();
    let (out, loss, seed) = match cfg.model {
        ModelKind::Unet => {
            let out = params.forward(&mut g, None, &[], &images)?;
            let (d, grad) = dice_loss_on_logits(g.value(out), &masks)?;
            (out, LossBreakdown::new(0.0, d, 0.0), grad)
        }
        kind => {
            let mut ts = Vec::with_capacity(batch.len());
            let mut xs = Vec::with_capacity(batch.len());
            let mut noise = Vec::with_capacity(batch.len());
            for s in batch {
                let t = sample_timestep(rng, schedule.steps());
                let x0 = scale_mask(&s.mask());
                let e = Tensor::randn(x0.shape(), rng);
                xs.push(forward_noise(&x0, t, &e, schedule)?);
                noise.push(e);
                ts.push(t);
            }
            let x_t = Tensor::stack(&xs)?;
            let out = params.forward(&mut g, Some(&x_t), &ts, &images)?;
            if kind == ModelKind::SpineSegDiff {
                let (l, grad) = composite_loss_with_grad(g.value(out), &masks)?;
                (out, l, grad)
            } else {
                let eps = Tensor::stack(&noise)?;
                let m = mse_loss(g.value(out), &eps)?;
                (out, LossBreakdown::new(m, 0.0, 0.0), mse_grad(g.value(out), &eps)?)
            }
        }
    };
    if !loss.total.is_finite() {
        return Err(Error::Divergence { step, loss: loss.total });
    }
    let mut grads = g.backward(out, seed, params.len());
    let grad_norm = grads.clip_global_norm(cfg.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::Divergence { step, loss: grad_norm });
    }
    opt.step(params, &grads);
    Ok(StepOutcome { loss, grad_norm })
}

/// Trains the model named by `cfg.model`, keeping the best validation snapshot.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if ds.samples.is_empty() {
        return Err(Error::Missing("dataset has no samples".into()));
    }
    let (train_set, val_set) = split_samples(ds, cfg)?;
    let schedule = cfg.schedule.build()?;
    let mut params = ModelParams::init(cfg.descriptor(), cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, &params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = BatchSampler::new(train_set.len());
    let total_steps = cfg
        .max_steps
        .unwrap_or(cfg.epochs * train_set.len().div_ceil(cfg.batch_size));
    let started = Instant::now();
    let mut curve = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut stopped_early = false;
    let mut steps = 0;
    for step in 1..=total_steps {
        let idx = sampler.next(cfg.batch_size, &mut rng);
        let batch: Vec<&SliceSample> = idx.iter().map(|&i| train_set[i]).collect();
        let o = train_step(&mut params, &mut opt, &batch, &schedule, cfg, &mut rng, step)?;
        steps = step;
        let mut point = CurvePoint {
            step,
            epoch: sampler.epoch(),
            loss: o.loss.total,
            mse: o.loss.mse,
            dice: o.loss.dice,
            bce: o.loss.bce,
            grad_norm: o.grad_norm,
            val_metric: None,
            val_noise_mse: None,
        };
        if step % cfg.val_every == 0 || step == total_steps {
            let metric = validation_score(&params, &val_set, &schedule, &cfg.validation, cfg.selection)?;
            let nmse = if cfg.model == ModelKind::Iisdm {
                Some(noise_mse(&params, &val_set, &schedule, 8, cfg.seed ^ 0x9e37_79b9)?)
            } else {
                None
            };
            point.val_metric = Some(metric);
            point.val_noise_mse = nmse;
            log::info!(
                "step {step}: loss {:.4} val {:?} {metric:.4} noise mse {nmse:?} ({:.1}s)",
                o.loss.total,
                cfg.selection,
                started.elapsed().as_secs_f64()
            );
            if best.as_ref().is_none_or(|b| metric > b.metric) {
                best = Some(Checkpoint {
                    params: params.clone(),
                    step,
                    epoch: sampler.epoch(),
                    metric,
                    config: cfg.clone(),
                });
            }
            let metric_done = cfg.stop_at.is_none_or(|s| metric > s);
            let mse_done = match (cfg.stop_at_noise_mse, nmse) {
                (Some(lim), Some(m)) => m < lim,
                _ => true,
            };
            curve.push(point);
            if (cfg.stop_at.is_some() || cfg.stop_at_noise_mse.is_some()) && metric_done && mse_done {
                stopped_early = step < total_steps;
                break;
            }
            continue;
        }
        curve.push(point);
    }
    Ok(TrainReport {
        best: best.expect("at least one validation"),
        final_params: params,
        curve,
        steps,
        stopped_early,
        elapsed_secs: started.elapsed().as_secs_f64(),
        train_scans: train_set.len(),
        val_scans: val_set.len(),
    })
}

fn train_kind(ds: &Dataset, cfg: &TrainConfig, kind: ModelKind) -> Result<TrainReport> {
    if cfg.model != kind {
        return Err(Error::Config(format!("config is for {}, expected {}", cfg.model.as_str(), kind.as_str())));
    }
    train(ds, cfg)
}

pub fn train_spinesegdiff(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_kind(ds, cfg, ModelKind::SpineSegDiff)
}

pub fn train_iisdm(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_kind(ds, cfg, ModelKind::Iisdm)
}

pub fn train_unet_preseg(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_kind(ds, cfg, ModelKind::Unet)
}
