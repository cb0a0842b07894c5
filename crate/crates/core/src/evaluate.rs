//! Validation-set evaluation of trained models.

use cogcas_autodiff::Tensor;
use rayon::prelude::*;

use crate::error::Result;
use crate::inference::{self, ClassMask, ExistenceVector, MaskSet, Mode, Selection, Strategy};
use crate::metrics::{phase1_metrics, IouTable, Phase1Metrics};
use crate::model::{CascadeModel, MonolithicModel};
use crate::seed;
use crate::synth::Sample;

/// Validation samples paired with their cached features.
#[derive(Clone, Debug)]
pub struct EvalSet<'a> {
    pub samples: Vec<&'a Sample>,
    pub features: Vec<&'a Tensor>,
}

impl<'a> EvalSet<'a> {
    pub fn new(samples: Vec<&'a Sample>, features: Vec<&'a Tensor>) -> Self {
        assert_eq!(samples.len(), features.len(), "one feature map per sample");
        Self { samples, features }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModeKind {
    Full,
    SegmentationOnly,
    Oracle,
}

impl ModeKind {
    pub const ALL: [ModeKind; 3] = [ModeKind::Full, ModeKind::SegmentationOnly, ModeKind::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            ModeKind::Full => "full",
            ModeKind::SegmentationOnly => "segmentation-only",
            ModeKind::Oracle => "oracle",
        }
    }

    fn mode(self, sample: &Sample, learned: &[u16]) -> Mode {
        match self {
            ModeKind::Full => Mode::Full,
            ModeKind::SegmentationOnly => Mode::SegmentationOnly,
            ModeKind::Oracle => Mode::Oracle(
                learned
                    .iter()
                    .copied()
                    .filter(|&c| sample.truth.contains(c))
                    .collect(),
            ),
        }
    }
}

/// Per-image fusion seed derived from the run seed and the image id.
pub fn fusion_seed(run_seed: u64, image_id: u64) -> u64 {
    seed::mix(&[run_seed, image_id])
}

/// Everything the cascade computes for one image: router output and the
/// foreground plane of every learned class.
struct ImageOutputs {
    existence: ExistenceVector,
    planes: Vec<ClassMask>,
}

fn outputs(model: &CascadeModel, features: &Tensor) -> Result<ImageOutputs> {
    let all = inference::run_cascade(model, features, Selection::Threshold(0.0), &Mode::SegmentationOnly)?;
    Ok(ImageOutputs {
        existence: ExistenceVector {
            classes: model.classes(),
            probs: model.route(features)?,
        },
        planes: all.masks.masks,
    })
}

fn activated(out: &ImageOutputs, mode: &Mode, selection: Selection, learned: &[u16]) -> Result<Vec<u16>> {
    Ok(match mode {
        Mode::Full => out.existence.select(selection)?,
        Mode::SegmentationOnly => learned.to_vec(),
        Mode::Oracle(p) => p.clone(),
    })
}

/// IoU tables for every (mode, strategy) pair. Each image's segmenters run
/// once; modes differ only in which planes enter fusion, which gives the
/// same maps as separate `predict` calls.
pub fn evaluate_cascade(
    model: &CascadeModel,
    set: &EvalSet<'_>,
    selection: Selection,
    modes: &[ModeKind],
    strategies: &[Strategy],
    run_seed: u64,
) -> Result<Vec<(ModeKind, Strategy, IouTable)>> {
    let mut learned = model.classes();
    learned.sort_unstable();
    let per_image: Vec<Vec<IouTable>> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let sample = set.samples[i];
            let out = outputs(model, set.features[i])?;
            let (h, w) = (sample.truth.height, sample.truth.width);
            let mut tables = Vec::with_capacity(modes.len() * strategies.len());
            for &mk in modes {
                let mode = mk.mode(sample, &learned);
                let act = activated(&out, &mode, selection, &learned)?;
                let masks = MaskSet {
                    height: h,
                    width: w,
                    masks: out.planes.iter().filter(|m| act.contains(&m.class)).cloned().collect(),
                };
                for &st in strategies {
                    let labels = if st == Strategy::Loose {
                        inference::loose_labels(&masks, &sample.truth)?
                    } else {
                        inference::fuse(&masks, st, fusion_seed(run_seed, sample.id))?
                    };
                    let mut t = IouTable::new();
                    t.accumulate(&labels, &sample.truth)?;
                    tables.push(t);
                }
            }
            Ok(tables)
        })
        .collect::<Result<_>>()?;
    let mut result = Vec::new();
    let mut k = 0;
    for &mk in modes {
        for &st in strategies {
            let mut total = IouTable::new();
            for img in &per_image {
                total.merge(&img[k]);
            }
            result.push((mk, st, total));
            k += 1;
        }
    }
    Ok(result)
}

/// Per-class IoU of each head on its own: the class's mask is its
/// segmenter's argmax, gated by its router at the selection rule. No other
/// class takes part, so a frozen head scores the same at every checkpoint.
pub fn head_table(model: &CascadeModel, set: &EvalSet<'_>, selection: Selection) -> Result<IouTable> {
    let parts: Vec<IouTable> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let sample = set.samples[i];
            let out = outputs(model, set.features[i])?;
            let picked = out.existence.select(selection)?;
            let mut t = IouTable::new();
            for plane in &out.planes {
                let gate = picked.contains(&plane.class);
                let mask: Vec<bool> = (0..plane.fg.len()).map(|p| gate && plane.claims(p)).collect();
                t.accumulate_binary(plane.class, &mask, &sample.truth)?;
            }
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let mut total = IouTable::new();
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

/// Per-class IoU of the monolithic head's argmax map, one class at a time.
pub fn baseline_table(model: &MonolithicModel, set: &EvalSet<'_>) -> Result<IouTable> {
    let classes = model.channel_classes();
    let parts: Vec<IouTable> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let pred = inference::predict_baseline(model, set.features[i])?;
            let mut t = IouTable::new();
            for &c in classes.iter().filter(|&&c| c != 0) {
                let mask: Vec<bool> = pred.labels.iter().map(|&l| l == c).collect();
                t.accumulate_binary(c, &mask, &set.samples[i].truth)?;
            }
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let mut total = IouTable::new();
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

/// Multi-class IoU of the monolithic head's argmax map.
pub fn baseline_miou_table(model: &MonolithicModel, set: &EvalSet<'_>) -> Result<IouTable> {
    let parts: Vec<IouTable> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let pred = inference::predict_baseline(model, set.features[i])?;
            let mut t = IouTable::new();
            t.accumulate(&pred, &set.samples[i].truth)?;
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let mut total = IouTable::new();
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

/// Router detection quality against true presence.
pub fn phase1(model: &CascadeModel, set: &EvalSet<'_>, alpha: f64) -> Result<Phase1Metrics> {
    let classes = model.classes();
    let scores: Vec<Vec<f64>> = set
        .features
        .par_iter()
        .map(|f| model.route(f))
        .collect::<Result<_>>()?;
    let truth: Vec<Vec<bool>> = set
        .samples
        .iter()
        .map(|s| classes.iter().map(|&c| s.truth.contains(c)).collect())
        .collect();
    phase1_metrics(&classes, &scores, &truth, alpha)
}
