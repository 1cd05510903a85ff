//! Noise schedules, closed-form forward noising and deterministic DDIM steps.
//!
//! Timesteps are 0-based: `t = 0` is the least-noised step and `t = T - 1`
//! the most. Arrays are `f32`; schedule tables and per-element arithmetic are
//! carried in `f64`. Nothing in here draws random numbers: noise is passed in.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Offset of the squared-cosine curve.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clamp on per-step betas of the cosine schedule.
pub const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule of `steps` diffusion steps.
    ///
    /// `beta1`/`beta_t` bound the linear ramp and are ignored by the cosine kind.
    pub fn new(kind: ScheduleKind, steps: usize, beta1: f64, beta_t: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                if !(beta1 > 0.0 && beta1 <= beta_t && beta_t < 1.0) {
                    return Err(Error::InvalidRange(format!(
                        "linear schedule needs 0 < beta1 <= betaT < 1, got {beta1}, {beta_t}"
                    )));
                }
                if steps == 1 {
                    vec![beta1]
                } else {
                    (0..steps)
                        .map(|t| beta1 + (beta_t - beta1) * t as f64 / (steps - 1) as f64)
                        .collect()
                }
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                        * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (0..steps)
                    .map(|t| (1.0 - f(t as f64 + 1.0) / f(t as f64)).min(COSINE_MAX_BETA))
                    .collect()
            }
        };
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidRange(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0f64, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            kind,
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Linear schedule from 1e-4 to 0.02 over 1000 steps.
    pub fn default_linear() -> Self {
        Self::new(ScheduleKind::Linear, 1000, 1e-4, 0.02).expect("valid default schedule")
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Total number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::InvalidRange(format!(
                "timestep {t} outside [0, {})",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Serializable schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta1: f64,
    pub beta_t: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta1: 1e-4,
            beta_t: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn cosine(steps: usize) -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Cosine,
            steps,
            ..Self::default()
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.kind, self.steps, self.beta1, self.beta_t)
    }
}

/// Samples `x_t = sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·ε`.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    forward_noise_with(x0, eps, ab)
}

pub(crate) fn forward_noise_with(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_map(eps, |x, e| (a * x as f64 + s * e as f64) as f32)
}

/// One deterministic (η = 0) DDIM update from `t` to `t_prev` given an `x0` estimate.
///
/// `t_prev = -1` is the terminal step and returns `x0_pred` unchanged.
pub fn ddim_step(
    x_t: &Tensor,
    x0_pred: &Tensor,
    t: usize,
    t_prev: i64,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    x_t.ensure_same_shape(x0_pred)?;
    if t_prev < -1 || t_prev >= t as i64 {
        return Err(Error::TimestepOrder { t, t_prev });
    }
    if t_prev == -1 {
        return Ok(x0_pred.clone());
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev as usize);
    if ab_t == ab_prev {
        return Ok(x_t.clone());
    }
    let (sa_t, ss_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sa_p, ss_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    x_t.zip_map(x0_pred, |x, x0| {
        let eps_hat = (x as f64 - sa_t * x0 as f64) / ss_t;
        (sa_p * x0 as f64 + ss_p * eps_hat) as f32
    })
}

/// Recovers the `x0` estimate implied by a noise prediction.
pub fn x0_from_eps(x_t: &Tensor, eps_hat: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps_hat, |x, e| ((x as f64 - s * e as f64) / a) as f32)
}

/// Strictly decreasing timesteps visited by a reduced-step DDIM sampler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepSubsequence {
    steps: Vec<usize>,
}

impl TimestepSubsequence {
    /// `count` uniformly spaced indices from `total - 1` down to 0.
    pub fn new(total: usize, count: usize) -> Result<Self> {
        if count < 1 || count > total {
            return Err(Error::InvalidRange(format!(
                "step count {count} outside [1, {total}]"
            )));
        }
        let steps = if count == 1 {
            vec![total - 1]
        } else {
            let span = (total - 1) as f64;
            (0..count)
                .map(|i| (span * (count - 1 - i) as f64 / (count - 1) as f64).round() as usize)
                .collect()
        };
        Ok(TimestepSubsequence { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn count(&self) -> usize {
        self.steps.len()
    }

    /// `(t, t_prev)` pairs in sampling order; the last pair ends on the `-1` sentinel.
    pub fn pairs(&self) -> Vec<(usize, i64)> {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.steps.get(i + 1).map_or(-1, |&p| p as i64)))
            .collect()
    }
}

/// Draws a training timestep uniformly from `[0, total)`.
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, total: usize) -> usize {
    rng.random_range(0..total)
}

/// Maps a one-hot mask from {0, 1} to {-1, +1}.
pub fn scale_mask(onehot: &Tensor) -> Tensor {
    onehot.map(|v| 2.0 * v - 1.0)
}

/// Inverse of [`scale_mask`].
pub fn unscale_mask(scaled: &Tensor) -> Tensor {
    scaled.map(|v| (v + 1.0) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_endpoints() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.betas()[0], 1e-4);
        assert!((s.betas()[999] - 0.02).abs() < 1e-15);
        assert!(s.betas().windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 1, 1e-4, 1e-4).unwrap();
        assert_eq!(s.alpha_bars(), &[0.9999]);
    }

    #[test]
    fn alpha_bar_matches_running_product() {
        let s = NoiseSchedule::default_linear();
        let mut prod = 1.0f64;
        for t in 0..500 {
            let beta = 1e-4 + (0.02 - 1e-4) * t as f64 / 999.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bars()[499] - prod).abs() < 1e-12);
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Cosine, 0, 0.0, 0.0).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 1000, 0.0, 0.0).unwrap();
        assert!(s.alpha_bars()[0] > 0.99);
        assert!(s.alpha_bars()[999] < 0.01);
        assert!(s.alpha_bars()[999] > 0.0);
        assert!(s.betas().iter().all(|&b| b <= COSINE_MAX_BETA));
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn forward_noise_closed_form() {
        let x0 = Tensor::full(&[2, 2], 1.0);
        let eps = Tensor::full(&[2, 2], 1.0);
        let out = forward_noise_with(&x0, &eps, 0.25).unwrap();
        for &v in out.data() {
            assert!((v - 1.366_025_4).abs() < 1e-6);
        }
        let zero = Tensor::zeros(&[2, 2]);
        let out = forward_noise_with(&x0, &zero, 0.64).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.8).abs() < 1e-7));
        assert_eq!(forward_noise_with(&x0, &eps, 1.0).unwrap(), x0);
    }

    #[test]
    fn forward_noise_shape_mismatch() {
        let s = NoiseSchedule::default_linear();
        let r = forward_noise(&Tensor::zeros(&[2, 2]), 3, &Tensor::zeros(&[4]), &s);
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn ddim_terminal_and_order() {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xt = Tensor::randn(&[4, 4], &mut rng);
        let x0 = Tensor::randn(&[4, 4], &mut rng);
        assert_eq!(ddim_step(&xt, &x0, 10, -1, &s).unwrap(), x0);
        assert!(matches!(
            ddim_step(&xt, &x0, 10, 10, &s),
            Err(Error::TimestepOrder { .. })
        ));
        assert!(ddim_step(&xt, &x0, 10, -2, &s).is_err());
    }

    #[test]
    fn subsequence_contracts() {
        assert_eq!(TimestepSubsequence::new(1000, 1).unwrap().steps(), &[999]);
        let ten = TimestepSubsequence::new(1000, 10).unwrap();
        assert_eq!(ten.count(), 10);
        assert_eq!(*ten.steps().last().unwrap(), 0);
        assert!(ten.steps().windows(2).all(|w| w[0] > w[1]));
        let full = TimestepSubsequence::new(30, 30).unwrap();
        let identity: Vec<usize> = (0..30).rev().collect();
        assert_eq!(full.steps(), identity.as_slice());
        assert!(TimestepSubsequence::new(10, 0).is_err());
        assert!(TimestepSubsequence::new(10, 11).is_err());
        let pairs = TimestepSubsequence::new(5, 3).unwrap().pairs();
        assert_eq!(pairs, vec![(4, 2), (2, 0), (0, -1)]);
    }
}
