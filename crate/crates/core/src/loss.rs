//! Segmentation losses on logits with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_EPS: f64 = 1.0;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check(logits: &[f64], target: &[u8]) -> Result<()> {
    if logits.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} logits vs {} targets",
            logits.len(),
            target.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Shape("empty loss input".into()));
    }
    Ok(())
}

/// Mean focal loss and its gradient with respect to each logit.
pub fn focal(logits: &[f64], target: &[u8], alpha: f64, gamma: f64) -> Result<(f64, Vec<f64>)> {
    check(logits, target)?;
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.iter().zip(target) {
        let p = sigmoid(z);
        let positive = t != 0;
        let raw = if positive { p } else { 1.0 - p };
        let pt = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let at = if positive { alpha } else { 1.0 - alpha };
        let q = 1.0 - pt;
        total += -at * q.powf(gamma) * pt.ln();
        let g = if raw != pt {
            0.0
        } else {
            let dl_dpt = -at * (q.powf(gamma) / pt - gamma * q.powf(gamma - 1.0) * pt.ln());
            let dpt_dz = if positive { p * (1.0 - p) } else { -p * (1.0 - p) };
            dl_dpt * dpt_dz / n
        };
        grad.push(g);
    }
    Ok((total / n, grad))
}

pub fn focal_loss(logits: &[f64], target: &[u8], alpha: f64, gamma: f64) -> Result<f64> {
    focal(logits, target, alpha, gamma).map(|(l, _)| l)
}

/// Soft dice loss with additive smoothing and its gradient.
pub fn dice(logits: &[f64], target: &[u8]) -> Result<(f64, Vec<f64>)> {
    check(logits, target)?;
    let p: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let inter: f64 = p.iter().zip(target).filter(|(_, &t)| t != 0).map(|(p, _)| p).sum();
    let sum_p: f64 = p.iter().sum();
    let sum_t = target.iter().filter(|&&t| t != 0).count() as f64;
    let num = 2.0 * inter + DICE_EPS;
    let den = sum_p + sum_t + DICE_EPS;
    let grad = p
        .iter()
        .zip(target)
        .map(|(&pi, &t)| {
            let ti = (t != 0) as u8 as f64;
            -(2.0 * ti * den - num) / (den * den) * pi * (1.0 - pi)
        })
        .collect();
    Ok((1.0 - num / den, grad))
}

pub fn dice_loss(logits: &[f64], target: &[u8]) -> Result<f64> {
    dice(logits, target).map(|(l, _)| l)
}

/// Mean binary cross-entropy on logits and its gradient.
pub fn bce(logits: &[f64], target: &[u8]) -> Result<(f64, Vec<f64>)> {
    check(logits, target)?;
    let n = logits.len() as f64;
    let mut total = 0.0;
    let grad = logits
        .iter()
        .zip(target)
        .map(|(&z, &t)| {
            let t = (t != 0) as u8 as f64;
            let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
            total += softplus - t * z;
            (sigmoid(z) - t) / n
        })
        .collect();
    Ok((total / n, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    FocalDice,
    BceDice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub lambda_focal: f64,
    pub lambda_dice: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::FocalDice,
            lambda_focal: 1.0,
            lambda_dice: 0.05,
            focal_alpha: 0.9,
            focal_gamma: 1.5,
        }
    }
}

/// Weighted objective `λ_focal · L_pixel + λ_dice · L_dice` and its gradient,
/// where the pixel term is focal or BCE per `kind`.
pub fn objective(logits: &[f64], target: &[u8], cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let (lp, gp) = match cfg.kind {
        LossKind::FocalDice => focal(logits, target, cfg.focal_alpha, cfg.focal_gamma)?,
        LossKind::BceDice => bce(logits, target)?,
    };
    let (ld, gd) = dice(logits, target)?;
    let grad = gp
        .iter()
        .zip(&gd)
        .map(|(a, b)| cfg.lambda_focal * a + cfg.lambda_dice * b)
        .collect();
    Ok((cfg.lambda_focal * lp + cfg.lambda_dice * ld, grad))
}
