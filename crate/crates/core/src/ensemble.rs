//! Step-uncertainty ensemble inference and the variance-based noise-model baseline.
//!
//! For the direct-mask model, `S` DDIM chains start from independent noise. At
//! each of the last `T_s` sampled steps the softmax of the predicted mask is
//! averaged over chains, its elementwise entropy measures disagreement, and
//! the fused map weights each step by `e^{σ(t/T_s)}·(1 − û_t)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::diffusion::{ddim_step, NoiseSchedule, TimestepSubsequence};
use crate::error::{Error, Result};
use crate::losses::BCE_CLAMP;
use crate::networks::{scale_image, ModelKind, ModelParams};
use crate::tensor::{argmax_channels, one_hot, softmax_channels, Tensor};

fn default_samples() -> usize {
    5
}
fn default_steps() -> usize {
    10
}
fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    /// Independent chains `S`.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Number of final sampled steps fused, `T_s`.
    #[serde(default = "default_steps")]
    pub fuse_last: usize,
    #[serde(default = "default_steps")]
    pub ddim_steps: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            samples: default_samples(),
            fuse_last: default_steps(),
            ddim_steps: default_steps(),
            seed: default_seed(),
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 1 || self.ddim_steps < 1 || self.fuse_last < 1 || self.fuse_last > self.ddim_steps {
            return Err(Error::Config(format!(
                "ensemble needs S >= 1 and 1 <= T_s <= ddim_steps, got S={}, T_s={}, ddim_steps={}",
                self.samples, self.fuse_last, self.ddim_steps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    /// `[T_s, C, H, W]`, earliest fused step first.
    pub per_step_mean_probs: Tensor,
    /// `[T_s, C, H, W]`.
    pub per_step_uncertainty: Tensor,
    /// `[C, H, W]`, unnormalized.
    pub fused: Tensor,
    /// Row-major `H × W` class ids.
    pub label_map: Vec<u8>,
    /// Reverse (network) steps taken per chain.
    pub reverse_steps: usize,
}

impl EnsemblePrediction {
    /// Channel-summed entropy of the last fused step, `[H, W]` row-major.
    pub fn uncertainty_map(&self) -> Vec<f32> {
        let (t, c, h, w) = self.per_step_uncertainty.dims4().expect("4-d uncertainty");
        let hw = h * w;
        let last = &self.per_step_uncertainty.data()[(t - 1) * c * hw..];
        (0..hw).map(|p| (0..c).map(|k| last[k * hw + p]).sum()).collect()
    }
}

/// Elementwise mean over the leading sample axis of `[S, C, H, W]`.
pub fn mean_probability(samples: &Tensor) -> Result<Tensor> {
    let (s, c, h, w) = samples.dims4()?;
    if s == 0 {
        return Err(Error::Degenerate("mean of zero samples".into()));
    }
    let n = c * h * w;
    let d = samples.data();
    let out: Vec<f32> = (0..n)
        .map(|i| ((0..s).map(|k| d[k * n + i] as f64).sum::<f64>() / s as f64) as f32)
        .collect();
    Tensor::new(&[c, h, w], out)
}

/// Elementwise `−p·ln p`, with `p` clamped below by the BCE epsilon inside the log.
pub fn entropy_uncertainty(mean_probs: &Tensor) -> Tensor {
    mean_probs.map(|p| {
        let p = (p as f64).clamp(0.0, 1.0);
        (-p * p.max(BCE_CLAMP).ln()).max(0.0) as f32
    })
}

/// Weight of fused step `t ∈ 1..=T_s`: `e^{σ(t/T_s)}`.
pub fn step_weight(t: usize, fuse_last: usize) -> f64 {
    let x = t as f64 / fuse_last as f64;
    (1.0 / (1.0 + (-x).exp())).exp()
}

/// Step fusion `Σ_t e^{σ(t/T_s)} (1 − û_t) p̄_t` over the leading timestep axis.
pub fn fuse_predictions(per_step_mean_probs: &Tensor, per_step_uncertainty: &Tensor) -> Result<Tensor> {
    per_step_mean_probs.ensure_same_shape(per_step_uncertainty)?;
    let (t, c, h, w) = per_step_mean_probs.dims4()?;
    if t == 0 {
        return Err(Error::Degenerate("no timesteps to fuse".into()));
    }
    let n = c * h * w;
    let (p, u) = (per_step_mean_probs.data(), per_step_uncertainty.data());
    let weights: Vec<f64> = (1..=t).map(|k| step_weight(k, t)).collect();
    let out: Vec<f32> = (0..n)
        .map(|i| {
            (0..t)
                .map(|k| weights[k] * (1.0 - u[k * n + i] as f64) * p[k * n + i] as f64)
                .sum::<f64>() as f32
        })
        .collect();
    Tensor::new(&[c, h, w], out)
}

/// Assembles a prediction from per-step, per-chain softmax maps `[S, C, H, W]`.
pub fn fuse_steps(step_probs: &[Tensor], reverse_steps: usize) -> Result<EnsemblePrediction> {
    let means = step_probs.iter().map(mean_probability).collect::<Result<Vec<_>>>()?;
    let unc: Vec<Tensor> = means.iter().map(entropy_uncertainty).collect();
    let p = Tensor::stack(&means)?;
    let u = Tensor::stack(&unc)?;
    let fused = fuse_predictions(&p, &u)?;
    let label_map = argmax_channels(&fused)?;
    Ok(EnsemblePrediction {
        per_step_mean_probs: p,
        per_step_uncertainty: u,
        fused,
        label_map,
        reverse_steps,
    })
}

/// Deterministic per-chain noise `[C, H, W]`: chain `s` uses stream `s` of the seeded generator.
pub fn chain_noise(seed: u64, chain: usize, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    Tensor::randn(shape, &mut rng)
}

fn repeat_batch(t: &Tensor, n: usize) -> Result<Tensor> {
    let mut shape = vec![n];
    shape.extend_from_slice(t.shape());
    let mut data = Vec::with_capacity(t.len() * n);
    for _ in 0..n {
        data.extend_from_slice(t.data());
    }
    Tensor::new(&shape, data)
}

/// One batched network evaluation over all chains. `image4` is the scaled `[S, 1, H, W]` slice.
fn evaluate(params: &ModelParams, x: &Tensor, t: usize, image4: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let mut g = Graph::inference();
    let out = params.forward(&mut g, Some(x), &vec![t; n], image4)?;
    Ok(g.value(out).clone())
}

fn split_chains(x: &Tensor) -> Result<Vec<Tensor>> {
    let n = x.shape()[0];
    Ok((0..n).map(|i| x.index0(i)).collect())
}

/// Runs direct-mask DDIM chains from explicit initial states `[C, H, W]` over `steps`,
/// fusing the last `fuse_last` steps.
pub fn sample_chains(
    params: &ModelParams,
    y: &Tensor,
    schedule: &NoiseSchedule,
    steps: &TimestepSubsequence,
    initial: &[Tensor],
    fuse_last: usize,
) -> Result<EnsemblePrediction> {
    if params.descriptor().kind != ModelKind::SpineSegDiff {
        return Err(Error::Config("step-uncertainty inference needs a direct-mask model".into()));
    }
    if initial.is_empty() {
        return Err(Error::Degenerate("no chains to sample".into()));
    }
    let image4 = repeat_batch(&scale_image(y), initial.len())?;
    let mut x = Tensor::stack(initial)?;
    let pairs = steps.pairs();
    let keep_from = pairs.len().saturating_sub(fuse_last.max(1));
    let mut kept = Vec::with_capacity(pairs.len() - keep_from);
    for (i, &(t, t_prev)) in pairs.iter().enumerate() {
        let logits = evaluate(params, &x, t, &image4)?;
        let probs = softmax_channels(&logits)?;
        let x0 = probs.map(|p| 2.0 * p - 1.0);
        let next: Vec<Tensor> = split_chains(&x)?
            .iter()
            .zip(split_chains(&x0)?)
            .map(|(xi, x0i)| ddim_step(xi, &x0i, t, t_prev, schedule))
            .collect::<Result<_>>()?;
        x = Tensor::stack(&next)?;
        if i >= keep_from {
            kept.push(probs);
        }
    }
    fuse_steps(&kept, pairs.len())
}

/// Step-uncertainty ensemble over `S` seeded chains started from pure noise.
pub fn run_spinesegdiff_inference(
    params: &ModelParams,
    y: &Tensor,
    schedule: &NoiseSchedule,
    config: &EnsembleConfig,
) -> Result<EnsemblePrediction> {
    config.validate()?;
    let d = params.descriptor();
    let shape = [d.classes, d.image_size, d.image_size];
    let initial: Vec<Tensor> = (0..config.samples).map(|s| chain_noise(config.seed, s, &shape)).collect();
    let steps = TimestepSubsequence::new(schedule.steps(), config.ddim_steps)?;
    sample_chains(params, y, schedule, &steps, &initial, config.fuse_last)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IisdmConfig {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_steps")]
    pub ddim_steps: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for IisdmConfig {
    fn default() -> Self {
        IisdmConfig {
            samples: default_samples(),
            ddim_steps: default_steps(),
            seed: default_seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IisdmPrediction {
    /// One crisp one-hot `[C, H, W]` mask per chain.
    pub masks: Vec<Tensor>,
    /// Mean of the crisp masks, `[C, H, W]`.
    pub mean_mask: Tensor,
    pub label_map: Vec<u8>,
    /// Population variance over chains, `[C, H, W]`.
    pub variance: Tensor,
    pub reverse_steps: usize,
}

impl IisdmPrediction {
    /// Channel-summed variance, `[H, W]` row-major.
    pub fn variance_map(&self) -> Vec<f32> {
        let (c, h, w) = self.variance.dims3().expect("3-d variance");
        let hw = h * w;
        let v = self.variance.data();
        (0..hw).map(|p| (0..c).map(|k| v[k * hw + p]).sum()).collect()
    }
}

/// Mean and population variance of crisp masks.
pub fn mask_statistics(masks: &[Tensor]) -> Result<(Tensor, Tensor)> {
    let stacked = Tensor::stack(masks)?;
    let mean = mean_probability(&stacked)?;
    let (s, n) = (masks.len(), mean.len());
    let d = stacked.data();
    let var: Vec<f32> = (0..n)
        .map(|i| {
            let m = mean.data()[i] as f64;
            ((0..s).map(|k| (d[k * n + i] as f64 - m).powi(2)).sum::<f64>() / s as f64) as f32
        })
        .collect();
    let var = Tensor::new(mean.shape(), var)?;
    Ok((mean, var))
}

/// Noise-model sampling from explicit initial noises; each chain ends in a crisp mask.
pub fn sample_iisdm_chains(
    params: &ModelParams,
    y: &Tensor,
    schedule: &NoiseSchedule,
    ddim_steps: usize,
    initial: &[Tensor],
) -> Result<IisdmPrediction> {
    if params.descriptor().kind != ModelKind::Iisdm {
        return Err(Error::Config("variance inference needs a noise-prediction model".into()));
    }
    if initial.is_empty() {
        return Err(Error::Degenerate("no chains to sample".into()));
    }
    let steps = TimestepSubsequence::new(schedule.steps(), ddim_steps)?;
    let image4 = repeat_batch(&scale_image(y), initial.len())?;
    let mut x = Tensor::stack(initial)?;
    let mut x0_last = x.clone();
    for &(t, t_prev) in &steps.pairs() {
        let eps = evaluate(params, &x, t, &image4)?;
        let ab = schedule.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let x0 = x.zip_map(&eps, |xv, e| (((xv as f64 - s * e as f64) / a).clamp(-1.0, 1.0)) as f32)?;
        let next: Vec<Tensor> = split_chains(&x)?
            .iter()
            .zip(split_chains(&x0)?)
            .map(|(xi, x0i)| ddim_step(xi, &x0i, t, t_prev, schedule))
            .collect::<Result<_>>()?;
        x = Tensor::stack(&next)?;
        x0_last = x0;
    }
    let (_, c, h, w) = x0_last.dims4()?;
    let masks = split_chains(&x0_last)?
        .iter()
        .map(|m| one_hot(&argmax_channels(m)?, c, h, w))
        .collect::<Result<Vec<_>>>()?;
    let (mean_mask, variance) = mask_statistics(&masks)?;
    let label_map = argmax_channels(&mean_mask)?;
    Ok(IisdmPrediction {
        masks,
        mean_mask,
        label_map,
        variance,
        reverse_steps: steps.count(),
    })
}

/// `S` seeded noise-model chains with pixel-wise variance uncertainty.
pub fn run_iisdm_inference(
    params: &ModelParams,
    y: &Tensor,
    schedule: &NoiseSchedule,
    config: &IisdmConfig,
) -> Result<IisdmPrediction> {
    if config.samples < 1 || config.ddim_steps < 1 {
        return Err(Error::Config("IISDM inference needs at least one chain and one step".into()));
    }
    let d = params.descriptor();
    let shape = [d.classes, d.image_size, d.image_size];
    let initial: Vec<Tensor> = (0..config.samples).map(|s| chain_noise(config.seed, s, &shape)).collect();
    sample_iisdm_chains(params, y, schedule, config.ddim_steps, &initial)
}

/// Crisp label map for any model kind; diffusion models sample with `config`
/// (the noise model ignores `fuse_last`).
pub fn predict_label_map(
    params: &ModelParams,
    y: &Tensor,
    schedule: &NoiseSchedule,
    config: &EnsembleConfig,
) -> Result<Vec<u8>> {
    match params.descriptor().kind {
        ModelKind::SpineSegDiff => Ok(run_spinesegdiff_inference(params, y, schedule, config)?.label_map),
        ModelKind::Iisdm => {
            let c = IisdmConfig {
                samples: config.samples,
                ddim_steps: config.ddim_steps,
                seed: config.seed,
            };
            Ok(run_iisdm_inference(params, y, schedule, &c)?.label_map)
        }
        ModelKind::Unet => argmax_channels(&params.segment(y)?),
    }
}
