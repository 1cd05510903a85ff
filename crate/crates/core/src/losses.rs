//! Training objectives and their analytic gradients with respect to network logits.
//!
//! Mask tensors are CHW or NCHW. Dice is averaged over the foreground
//! channels (1..C) of every sample; MSE and BCE are means over all elements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_channels, Tensor};

/// Probability clamp applied before logarithms.
pub const BCE_CLAMP: f64 = 1e-7;
/// Additive smoothing in the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub dice: f64,
    pub bce: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(mse: f64, dice: f64, bce: f64) -> Self {
        LossBreakdown {
            mse,
            dice,
            bce,
            total: mse + dice + bce,
        }
    }
}

fn nchw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((1, *c, h * w)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        s => Err(Error::InvalidRange(format!("expected CHW or NCHW mask, got {s:?}"))),
    }
}

pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.ensure_same_shape(target)?;
    let n = pred.len().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// d mse / d pred.
pub fn mse_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let n = pred.len().max(1) as f64;
    pred.zip_map(target, |p, t| (2.0 * (p as f64 - t as f64) / n) as f32)
}

/// Per-(sample, foreground channel) soft Dice terms `(2I + ε, P + Y + ε)`.
fn dice_terms(probs: &Tensor, target: &Tensor) -> Result<Vec<(f64, f64)>> {
    probs.ensure_same_shape(target)?;
    let (n, c, hw) = nchw(probs)?;
    if c < 2 {
        return Err(Error::InvalidRange("dice needs a background and at least one foreground channel".into()));
    }
    let (p, y) = (probs.data(), target.data());
    let mut terms = Vec::with_capacity(n * (c - 1));
    for s in 0..n {
        for k in 1..c {
            let off = (s * c + k) * hw;
            let (mut inter, mut sp, mut sy) = (0.0f64, 0.0f64, 0.0f64);
            for i in off..off + hw {
                inter += p[i] as f64 * y[i] as f64;
                sp += p[i] as f64;
                sy += y[i] as f64;
            }
            terms.push((2.0 * inter + DICE_SMOOTH, sp + sy + DICE_SMOOTH));
        }
    }
    Ok(terms)
}

/// Soft Dice loss `1 − (2|X̂∩X| + ε)/(|X̂| + |X| + ε)`, averaged over foreground channels.
pub fn dice_loss(probs: &Tensor, target_onehot: &Tensor) -> Result<f64> {
    let terms = dice_terms(probs, target_onehot)?;
    let mean = terms.iter().map(|(num, den)| num / den).sum::<f64>() / terms.len() as f64;
    Ok(1.0 - mean)
}

/// d dice / d probs.
pub fn dice_grad(probs: &Tensor, target_onehot: &Tensor) -> Result<Tensor> {
    let terms = dice_terms(probs, target_onehot)?;
    let (n, c, hw) = nchw(probs)?;
    let scale = 1.0 / terms.len() as f64;
    let mut g = Tensor::zeros(probs.shape());
    let y = target_onehot.data();
    let gd = g.data_mut();
    for s in 0..n {
        for k in 1..c {
            let (num, den) = terms[s * (c - 1) + (k - 1)];
            let off = (s * c + k) * hw;
            for i in off..off + hw {
                let d = (2.0 * y[i] as f64 * den - num) / (den * den);
                gd[i] = (-scale * d) as f32;
            }
        }
    }
    Ok(g)
}

fn clamp_prob(p: f32) -> f64 {
    (p as f64).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

/// Mean binary cross-entropy over every element.
pub fn bce_loss(probs: &Tensor, target: &Tensor) -> Result<f64> {
    probs.ensure_same_shape(target)?;
    let n = probs.len().max(1) as f64;
    Ok(-probs
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            let y = y as f64;
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum::<f64>()
        / n)
}

/// d bce / d probs (zero where the clamp is active).
pub fn bce_grad(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    let n = probs.len().max(1) as f64;
    probs.zip_map(target, |p, y| {
        let pd = p as f64;
        if pd <= BCE_CLAMP || pd >= 1.0 - BCE_CLAMP {
            return 0.0;
        }
        let y = y as f64;
        (-(y / pd - (1.0 - y) / (1.0 - pd)) / n) as f32
    })
}

/// Pulls a gradient w.r.t. softmax probabilities back to the logits.
pub fn softmax_backward(probs: &Tensor, grad_probs: &Tensor) -> Result<Tensor> {
    probs.ensure_same_shape(grad_probs)?;
    let (n, c, hw) = nchw(probs)?;
    let (p, g) = (probs.data(), grad_probs.data());
    let mut out = Tensor::zeros(probs.shape());
    let od = out.data_mut();
    for s in 0..n {
        let base = s * c * hw;
        for i in 0..hw {
            let dot: f64 = (0..c)
                .map(|k| p[base + k * hw + i] as f64 * g[base + k * hw + i] as f64)
                .sum();
            for k in 0..c {
                let idx = base + k * hw + i;
                od[idx] = (p[idx] as f64 * (g[idx] as f64 - dot)) as f32;
            }
        }
    }
    Ok(out)
}

/// Maps softmax probabilities into the {-1, +1} mask space used by the diffusion process.
pub fn probs_to_mask_space(probs: &Tensor) -> Tensor {
    probs.map(|p| 2.0 * p - 1.0)
}

/// MSE(2·softmax − 1, 2·onehot − 1) + Dice(softmax, onehot) + BCE(softmax, onehot).
pub fn composite_loss(x0_logits: &Tensor, target_onehot: &Tensor) -> Result<LossBreakdown> {
    composite_loss_with_grad(x0_logits, target_onehot).map(|(l, _)| l)
}

pub fn composite_loss_with_grad(x0_logits: &Tensor, target_onehot: &Tensor) -> Result<(LossBreakdown, Tensor)> {
    x0_logits.ensure_same_shape(target_onehot)?;
    let scaled = target_onehot.map(|v| 2.0 * v - 1.0);
    let probs = softmax_channels(x0_logits)?;
    let recon = probs_to_mask_space(&probs);
    let loss = LossBreakdown::new(
        mse_loss(&recon, &scaled)?,
        dice_loss(&probs, target_onehot)?,
        bce_loss(&probs, target_onehot)?,
    );
    let mut gp = dice_grad(&probs, target_onehot)?;
    gp.add_assign(&bce_grad(&probs, target_onehot)?);
    gp.add_assign(&mse_grad(&recon, &scaled)?.scale(2.0));
    let grad = softmax_backward(&probs, &gp)?;
    Ok((loss, grad))
}

/// Dice loss on softmax(logits), with its gradient w.r.t. the logits.
pub fn dice_loss_on_logits(logits: &Tensor, target_onehot: &Tensor) -> Result<(f64, Tensor)> {
    let probs = softmax_channels(logits)?;
    let loss = dice_loss(&probs, target_onehot)?;
    let grad = softmax_backward(&probs, &dice_grad(&probs, target_onehot)?)?;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn mse_examples() {
        let a = t(&[2], &[0.0, 0.5]);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let b = t(&[2], &[1.0, 1.5]);
        assert!((mse_loss(&b, &a).unwrap() - 1.0).abs() < 1e-12);
        let target = t(&[2], &[1.0, 0.0]);
        assert!((mse_loss(&a, &target).unwrap() - 0.625).abs() < 1e-12);
        assert!(mse_loss(&a, &t(&[1], &[0.0])).is_err());
    }

    #[test]
    fn dice_examples() {
        // Two-channel single-row masks: channel 1 is the foreground.
        let crisp = t(&[2, 1, 4], &[0., 0., 1., 1., 1., 1., 0., 0.]);
        assert!(dice_loss(&crisp, &crisp).unwrap() < 1e-5);
        let disjoint = t(&[2, 1, 4], &[1., 1., 0., 0., 0., 0., 1., 1.]);
        assert!((dice_loss(&disjoint, &crisp).unwrap() - 1.0).abs() < 1e-5);
        let half = t(&[2, 1, 4], &[0., 1., 1., 0., 1., 0., 0., 1.]);
        assert!((dice_loss(&half, &crisp).unwrap() - 0.5).abs() < 1e-5);
    }

    #[test]
    fn bce_examples() {
        let y = t(&[2], &[1.0, 0.0]);
        assert!(bce_loss(&y, &y).unwrap() <= -(1.0f64 - BCE_CLAMP).ln() + 1e-12);
        let half = t(&[2], &[0.5, 0.5]);
        assert!((bce_loss(&half, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-9);
        let p = t(&[2], &[0.9, 0.2]);
        let expected = -((0.9f64).ln() + (0.8f64).ln()) / 2.0;
        assert!((bce_loss(&p, &y).unwrap() - expected).abs() < 1e-6);
        assert!((expected - 0.1643).abs() < 1e-4);
    }

    #[test]
    fn composite_total_is_sum() {
        let logits = t(&[2, 1, 2], &[0.3, -1.2, 0.7, 2.0]);
        let y = t(&[2, 1, 2], &[1., 0., 0., 1.]);
        let l = composite_loss(&logits, &y).unwrap();
        assert_eq!(l.total, l.mse + l.dice + l.bce);
    }

    #[test]
    fn saturated_logits_give_near_zero_loss() {
        let y = t(&[2, 1, 2], &[1., 0., 0., 1.]);
        let sharp = y.map(|v| if v > 0.5 { 20.0 } else { -20.0 });
        assert!(composite_loss(&sharp, &y).unwrap().total < 1e-3);
    }
}
