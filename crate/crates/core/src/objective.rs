//! Per-item objectives over cached features, and full-batch reductions.

use cogcas_autodiff::{Tape, Tensor, Var};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};
use crate::model::{self, Arch, ClassHeads, MonolithicModel};
use crate::synth::LabelMap;

/// Where a head gets its feature map from.
#[derive(Clone, Copy, Debug)]
pub enum FeatureInput<'a> {
    /// Precomputed output of the frozen backbone.
    Fixed(&'a Tensor),
    /// Output of the stem; the tail layer runs on the tape with the
    /// parameters at `Net::tail_offset`.
    Tail(&'a Tensor),
}

/// Layout facts a forward pass needs besides the parameter slice.
#[derive(Clone, Copy, Debug)]
pub struct Net {
    pub arch: Arch,
    pub tail_offset: usize,
}

impl Net {
    pub fn features(&self, tape: &mut Tape, params: &[f64], input: FeatureInput<'_>) -> Result<Var> {
        match input {
            FeatureInput::Fixed(f) => Ok(tape.input(f.clone())),
            FeatureInput::Tail(stem) => {
                let s = tape.input(stem.clone());
                model::tail_on_tape(tape, &self.arch, params, self.tail_offset, s)
            }
        }
    }
}

/// A finite sum of per-item losses over a flat parameter vector.
pub trait Objective: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Loss of item `i`. When `grad` is given, the item's gradient is
    /// added into it.
    fn eval(&self, params: &[f64], i: usize, grad: Option<&mut [f64]>) -> Result<f64>;
}

fn finish(tape: &Tape, loss: Var, grad: Option<&mut [f64]>) -> Result<f64> {
    if let Some(g) = grad {
        tape.backward(loss, None)?.accumulate_into(g);
    }
    Ok(tape.value(loss).item())
}

/// Sum over `items` of per-item losses and gradients, reduced in index
/// order so the result does not depend on thread scheduling.
pub fn batch_loss_grad(obj: &dyn Objective, params: &[f64], items: &[usize]) -> Result<(f64, Vec<f64>)> {
    let parts: Vec<(f64, Vec<f64>)> = items
        .par_iter()
        .map(|&i| {
            let mut g = vec![0.0; params.len()];
            let l = obj.eval(params, i, Some(&mut g))?;
            Ok((l, g))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grad = vec![0.0; params.len()];
    for (l, g) in parts {
        total += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total, grad))
}

pub fn batch_loss(obj: &dyn Objective, params: &[f64], items: &[usize]) -> Result<f64> {
    let parts: Vec<f64> = items
        .par_iter()
        .map(|&i| obj.eval(params, i, None))
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum())
}

/// Mean loss and mean gradient over every item.
pub fn mean_loss_grad(obj: &dyn Objective, params: &[f64]) -> Result<(f64, Vec<f64>)> {
    let all: Vec<usize> = (0..obj.len()).collect();
    let (l, mut g) = batch_loss_grad(obj, params, &all)?;
    let n = obj.len().max(1) as f64;
    g.iter_mut().for_each(|v| *v /= n);
    Ok((l / n, g))
}

pub fn mean_loss(obj: &dyn Objective, params: &[f64]) -> Result<f64> {
    let all: Vec<usize> = (0..obj.len()).collect();
    Ok(batch_loss(obj, params, &all)? / obj.len().max(1) as f64)
}

/// Sum of BCE terms over a set of routers for each image.
pub struct RouterObjective<'a> {
    pub net: Net,
    pub heads: Vec<ClassHeads>,
    /// Feature input and one presence bit per head.
    pub items: Vec<(FeatureInput<'a>, Vec<f64>)>,
}

impl Objective for RouterObjective<'_> {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn eval(&self, params: &[f64], i: usize, grad: Option<&mut [f64]>) -> Result<f64> {
        let (input, targets) = &self.items[i];
        let mut tape = Tape::new();
        let f = self.net.features(&mut tape, params, *input)?;
        let pooled = tape.mean_spatial(f)?;
        let mut terms = Vec::with_capacity(self.heads.len());
        for (h, &y) in self.heads.iter().zip(targets) {
            let z = model::router_logit(&mut tape, &self.net.arch, params, h.router, pooled)?;
            let p = tape.sigmoid(z)?;
            terms.push(losses::bce(&mut tape, p, y)?);
        }
        let loss = losses::sum_all(&mut tape, &terms)?;
        finish(&tape, loss, grad)
    }
}

/// Focal + Dice loss of one class's segmenter. Items without a label map
/// are near-OOD images with an all-background target.
pub struct SegmenterObjective<'a> {
    pub net: Net,
    pub head: ClassHeads,
    pub loss: LossConfig,
    pub items: Vec<(FeatureInput<'a>, Option<&'a LabelMap>)>,
}

impl Objective for SegmenterObjective<'_> {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn eval(&self, params: &[f64], i: usize, grad: Option<&mut [f64]>) -> Result<f64> {
        let (input, label) = &self.items[i];
        let mut tape = Tape::new();
        let f = self.net.features(&mut tape, params, *input)?;
        let logits = model::segmenter_logits(&mut tape, &self.net.arch, params, self.head.segmenter, f)?;
        let plane = tape.value(logits).len() / 2;
        let target = match label {
            Some(map) => map.indicator(self.head.class),
            None => vec![0.0; plane],
        };
        let loss = losses::seg_loss_logits(&mut tape, logits, &target, &self.loss)?;
        finish(&tape, loss, grad)
    }
}

/// Per-pixel cross-entropy of the monolithic softmax head.
pub struct BaselineObjective<'a> {
    pub model: &'a MonolithicModel,
    pub items: Vec<(&'a Tensor, &'a LabelMap)>,
}

impl Objective for BaselineObjective<'_> {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn eval(&self, params: &[f64], i: usize, grad: Option<&mut [f64]>) -> Result<f64> {
        let (features, label) = self.items[i];
        let mut tape = Tape::new();
        let f = tape.input(features.clone());
        let logits = self.model.logits_on_tape(&mut tape, params, f)?;
        let order = self.model.channel_classes();
        let plane = label.labels.len();
        let mut onehot = vec![0.0; order.len() * plane];
        for (p, l) in label.labels.iter().enumerate() {
            let ch = order
                .iter()
                .position(|c| c == l)
                .ok_or(Error::UnknownClass(*l))?;
            onehot[ch * plane + p] = 1.0;
        }
        let loss = losses::pixel_ce_logits(&mut tape, logits, &onehot)?;
        finish(&tape, loss, grad)
    }
}

/// Weighted sum of mean objectives, e.g. `L_cls + λ Σ_c L_seg,c`.
pub struct Composite<'a> {
    pub parts: Vec<(f64, Box<dyn Objective + 'a>)>,
}

impl Composite<'_> {
    pub fn loss(&self, params: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (w, o) in &self.parts {
            total += w * mean_loss(o.as_ref(), params)?;
        }
        Ok(total)
    }

    pub fn loss_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut total = 0.0;
        let mut grad = vec![0.0; params.len()];
        for (w, o) in &self.parts {
            let (l, g) = mean_loss_grad(o.as_ref(), params)?;
            total += w * l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += w * b;
            }
        }
        Ok((total, grad))
    }
}
