//! Router and segmenter objectives, built on the tape so gradients come for
//! free.

use cogcas_autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the positive term inside focal loss; negatives get `1 - focal_alpha`.
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Weight of focal loss inside the segmentation loss.
    pub seg_focal: f64,
    /// Weight of `1 - dice` inside the segmentation loss.
    pub seg_dice: f64,
    /// Weight of the segmentation loss in the total.
    pub lambda: f64,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            seg_focal: 1.0,
            seg_dice: 1.0,
            lambda: 1.0,
            dice_eps: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::Config(format!("focal_alpha {} outside (0,1)", self.focal_alpha)));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::Config(format!("focal_gamma {}", self.focal_gamma)));
        }
        if !(self.dice_eps > 0.0) {
            return Err(Error::Config(format!("dice_eps {}", self.dice_eps)));
        }
        if !(self.lambda >= 0.0 && self.seg_focal >= 0.0 && self.seg_dice >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

fn check_binary(values: &[f64]) -> Result<()> {
    match values.iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(&v) => Err(Error::InvalidTarget(v)),
        None => Ok(()),
    }
}

fn clamped(tape: &mut Tape, p: Var) -> Result<Var> {
    Ok(tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?)
}

/// Binary cross-entropy of one probability against a 0/1 target.
pub fn bce(tape: &mut Tape, prob: Var, target: f64) -> Result<Var> {
    check_binary(&[target])?;
    let p = clamped(tape, prob)?;
    let q = if target == 1.0 { p } else { tape.rsub(1.0, p)? };
    let l = tape.log(q)?;
    Ok(tape.scale(l, -1.0)?)
}

/// Mean over the batch of the per-image sum of class BCE terms.
/// `probs[i][k]` pairs with `targets[i][k]`.
pub fn bce_multilabel(tape: &mut Tape, probs: &[Vec<Var>], targets: &[Vec<f64>]) -> Result<Var> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::Shape(format!("{} predictions, {} targets", probs.len(), targets.len())));
    }
    let mut terms = Vec::new();
    for (ps, ts) in probs.iter().zip(targets) {
        if ps.len() != ts.len() {
            return Err(Error::Shape(format!("{} classes predicted, {} targets", ps.len(), ts.len())));
        }
        for (&p, &t) in ps.iter().zip(ts) {
            terms.push(bce(tape, p, t)?);
        }
    }
    let total = sum_all(tape, &terms)?;
    Ok(tape.scale(total, 1.0 / probs.len() as f64)?)
}

pub(crate) fn sum_all(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Ok(tape.input(Tensor::scalar(0.0)));
    }
    let parts: Vec<Var> = terms
        .iter()
        .map(|&t| tape.reshape(t, &[1]))
        .collect::<std::result::Result<_, _>>()?;
    let cat = tape.concat(&parts)?;
    Ok(tape.sum(cat)?)
}

/// Focal loss between a foreground-probability map and a binary mask:
/// `-mean[a·M·(1-p)^γ·ln p + (1-a)·(1-M)·p^γ·ln(1-p)]`.
pub fn focal(tape: &mut Tape, fg: Var, target: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
    check_binary(target)?;
    let shape = tape.value(fg).shape().to_vec();
    if tape.value(fg).len() != target.len() {
        return Err(Error::Shape(format!("mask of {} for map {shape:?}", target.len())));
    }
    let p = clamped(tape, fg)?;
    let q = tape.rsub(1.0, p)?;
    let pos_w = tape.input(Tensor::new(shape.clone(), target.iter().map(|m| alpha * m).collect())?);
    let neg_w = tape.input(Tensor::new(shape, target.iter().map(|m| (1.0 - alpha) * (1.0 - m)).collect())?);

    let lp = tape.log(p)?;
    let mod_pos = tape.powf(q, gamma)?;
    let pos = tape.mul(mod_pos, lp)?;
    let pos = tape.mul(pos, pos_w)?;

    let lq = tape.log(q)?;
    let mod_neg = tape.powf(p, gamma)?;
    let neg = tape.mul(mod_neg, lq)?;
    let neg = tape.mul(neg, neg_w)?;

    let both = tape.add(pos, neg)?;
    let m = tape.mean(both)?;
    Ok(tape.scale(m, -1.0)?)
}

/// [`focal`] computed from two-channel `(bg, fg)` logits. The log terms
/// come from a log-softmax, so saturated pixels keep their gradient.
pub fn focal_logits(tape: &mut Tape, logits: Var, target: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
    check_binary(target)?;
    let probs = tape.softmax(logits)?;
    let logp = tape.log_softmax(logits)?;
    let (p, q) = (tape.channel(probs, 1)?, tape.channel(probs, 0)?);
    let (lp, lq) = (tape.channel(logp, 1)?, tape.channel(logp, 0)?);
    let shape = tape.value(p).shape().to_vec();
    if tape.value(p).len() != target.len() {
        return Err(Error::Shape(format!("mask of {} for map {shape:?}", target.len())));
    }
    let pos_w = tape.input(Tensor::new(shape.clone(), target.iter().map(|m| alpha * m).collect())?);
    let neg_w = tape.input(Tensor::new(shape, target.iter().map(|m| (1.0 - alpha) * (1.0 - m)).collect())?);

    let mod_pos = tape.powf(q, gamma)?;
    let pos = tape.mul(mod_pos, lp)?;
    let pos = tape.mul(pos, pos_w)?;

    let mod_neg = tape.powf(p, gamma)?;
    let neg = tape.mul(mod_neg, lq)?;
    let neg = tape.mul(neg, neg_w)?;

    let both = tape.add(pos, neg)?;
    let m = tape.mean(both)?;
    Ok(tape.scale(m, -1.0)?)
}

/// Soft Dice similarity `(2ΣMp + ε) / (ΣM + Σp + ε)`.
pub fn dice(tape: &mut Tape, fg: Var, target: &[f64], eps: f64) -> Result<Var> {
    let shape = tape.value(fg).shape().to_vec();
    if tape.value(fg).len() != target.len() {
        return Err(Error::Shape(format!("mask of {} for map {shape:?}", target.len())));
    }
    let m = tape.input(Tensor::new(shape, target.to_vec())?);
    let inter = tape.mul(m, fg)?;
    let inter = tape.sum(inter)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.shift(num, eps)?;
    let psum = tape.sum(fg)?;
    let den = tape.shift(psum, target.iter().sum::<f64>() + eps)?;
    Ok(tape.div(num, den)?)
}

/// `a·focal + b·(1 - dice)` for one map.
pub fn seg_loss(tape: &mut Tape, fg: Var, target: &[f64], cfg: &LossConfig) -> Result<Var> {
    let f = focal(tape, fg, target, cfg.focal_alpha, cfg.focal_gamma)?;
    let d = dice(tape, fg, target, cfg.dice_eps)?;
    let one_minus = tape.rsub(1.0, d)?;
    let a = tape.scale(f, cfg.seg_focal)?;
    let b = tape.scale(one_minus, cfg.seg_dice)?;
    Ok(tape.add(a, b)?)
}

/// `cls + λ·seg`.
pub fn total_loss(tape: &mut Tape, cls: Var, seg: Var, lambda: f64) -> Result<Var> {
    let s = tape.scale(seg, lambda)?;
    Ok(tape.add(cls, s)?)
}

/// Mean per-pixel cross-entropy of `[K, H, W]` logits against a one-hot
/// target of the same layout.
pub fn pixel_ce_logits(tape: &mut Tape, logits: Var, onehot: &[f64]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 3 || tape.value(logits).len() != onehot.len() {
        return Err(Error::Shape(format!("one-hot of {} for logits {shape:?}", onehot.len())));
    }
    check_binary(onehot)?;
    let plane = shape[1] * shape[2];
    let mask = tape.input(Tensor::new(shape, onehot.to_vec())?);
    let lp = tape.log_softmax(logits)?;
    let picked = tape.mul(lp, mask)?;
    let s = tape.sum(picked)?;
    Ok(tape.scale(s, -1.0 / plane as f64)?)
}

/// [`seg_loss`] from `(bg, fg)` logits, using [`focal_logits`].
pub fn seg_loss_logits(tape: &mut Tape, logits: Var, target: &[f64], cfg: &LossConfig) -> Result<Var> {
    let f = focal_logits(tape, logits, target, cfg.focal_alpha, cfg.focal_gamma)?;
    let probs = tape.softmax(logits)?;
    let fg = tape.channel(probs, 1)?;
    let d = dice(tape, fg, target, cfg.dice_eps)?;
    let one_minus = tape.rsub(1.0, d)?;
    let a = tape.scale(f, cfg.seg_focal)?;
    let b = tape.scale(one_minus, cfg.seg_dice)?;
    Ok(tape.add(a, b)?)
}
