//! Per-image cascade inference, the normalized cascade distribution, and
//! mask fusion.

use cogcas_autodiff::Tensor;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{self, CascadeModel, MonolithicModel};
use crate::seed::{self, domain};
use crate::synth::LabelMap;

/// How overlapping foreground claims are resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    /// Highest foreground probability wins.
    Logits,
    /// Seeded uniform choice among claimants.
    Random,
    /// Overlaps become background.
    Strict,
    /// Claimant with the smallest predicted area wins; ties go to the lower id.
    Distributed,
    /// Evaluation only: an overlap counts as correct when the true class
    /// is among its claimants.
    Loose,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Logits,
        Strategy::Random,
        Strategy::Strict,
        Strategy::Distributed,
        Strategy::Loose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Logits => "logits",
            Strategy::Random => "random",
            Strategy::Strict => "strict",
            Strategy::Distributed => "distributed",
            Strategy::Loose => "loose",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion strategy {s:?}")))
    }
}

/// Which classes get their segmenter run.
#[derive(Clone, Debug, PartialEq)]
pub enum Mode {
    /// Router probabilities thresholded by the selection rule.
    Full,
    /// Every learned class, no routing.
    SegmentationOnly,
    /// Ground-truth presence stands in for the router.
    Oracle(Vec<u16>),
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::SegmentationOnly => "segmentation-only",
            Mode::Oracle(_) => "oracle",
        }
    }
}

/// Rule turning existence probabilities into the predicted class set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Selection {
    Threshold(f64),
    TopK(usize),
}

impl Selection {
    fn validate(self) -> Result<()> {
        match self {
            Selection::Threshold(a) if !(0.0..=1.0).contains(&a) => Err(Error::Threshold(a)),
            _ => Ok(()),
        }
    }
}

/// Router output for every learned class, in head order.
#[derive(Clone, Debug, PartialEq)]
pub struct ExistenceVector {
    pub classes: Vec<u16>,
    pub probs: Vec<f64>,
}

impl ExistenceVector {
    /// Predicted classes in ascending id order.
    pub fn select(&self, rule: Selection) -> Result<Vec<u16>> {
        rule.validate()?;
        let mut picked: Vec<u16> = match rule {
            Selection::Threshold(alpha) => self
                .classes
                .iter()
                .zip(&self.probs)
                .filter(|(_, &p)| p >= alpha)
                .map(|(&c, _)| c)
                .collect(),
            Selection::TopK(k) => {
                let mut order: Vec<usize> = (0..self.classes.len()).collect();
                order.sort_by(|&a, &b| {
                    self.probs[b]
                        .total_cmp(&self.probs[a])
                        .then(self.classes[a].cmp(&self.classes[b]))
                });
                order.into_iter().take(k).map(|i| self.classes[i]).collect()
            }
        };
        picked.sort_unstable();
        Ok(picked)
    }
}

/// Foreground probability plane of one activated segmenter.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMask {
    pub class: u16,
    pub fg: Vec<f64>,
}

impl ClassMask {
    /// Per-pixel argmax of `(bg, fg)`; ties go to background.
    pub fn claims(&self, p: usize) -> bool {
        self.fg[p] > 1.0 - self.fg[p]
    }

    pub fn area(&self) -> usize {
        (0..self.fg.len()).filter(|&p| self.claims(p)).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub height: usize,
    pub width: usize,
    pub masks: Vec<ClassMask>,
}

impl MaskSet {
    /// Classes whose binarized mask covers pixel `p`, in mask order.
    pub fn claimants(&self, p: usize) -> Vec<u16> {
        self.masks.iter().filter(|m| m.claims(p)).map(|m| m.class).collect()
    }

    /// Per-pixel candidate sets: a lone claimant, `[0]` for unclaimed
    /// pixels, and for overlaps every claimant plus background.
    pub fn claimant_sets(&self) -> Vec<Vec<u16>> {
        (0..self.height * self.width)
            .map(|p| {
                let mut c = self.claimants(p);
                match c.len() {
                    0 => vec![0],
                    1 => c,
                    _ => {
                        c.insert(0, 0);
                        c
                    }
                }
            })
            .collect()
    }
}

fn logits_choice(set: &MaskSet, p: usize, claimants: &[u16]) -> u16 {
    let mut best = claimants[0];
    let mut best_p = f64::NEG_INFINITY;
    for m in &set.masks {
        if claimants.contains(&m.class) && m.fg[p] > best_p {
            best = m.class;
            best_p = m.fg[p];
        }
    }
    best
}

/// Resolve a mask set into one label per pixel. `seed` drives the random
/// strategy only.
pub fn fuse(set: &MaskSet, strategy: Strategy, seed: u64) -> Result<LabelMap> {
    let n = set.height * set.width;
    let areas: Vec<(u16, usize)> = set.masks.iter().map(|m| (m.class, m.area())).collect();
    let mut rng = seed::rng(&[seed, domain::FUSION]);
    let mut labels = vec![0u16; n];
    for (p, label) in labels.iter_mut().enumerate() {
        let claimants = set.claimants(p);
        *label = match claimants.len() {
            0 => 0,
            1 => claimants[0],
            k => match strategy {
                Strategy::Logits => logits_choice(set, p, &claimants),
                Strategy::Random => claimants[rng.gen_range(0..k)],
                Strategy::Strict => 0,
                Strategy::Distributed => *claimants
                    .iter()
                    .min_by_key(|&&c| {
                        let area = areas.iter().find(|a| a.0 == c).map_or(0, |a| a.1);
                        (area, c)
                    })
                    .expect("claimants"),
                Strategy::Loose => return Err(Error::LooseNotDeployable),
            },
        };
    }
    LabelMap::new(set.height, set.width, labels)
}

/// Loose-protocol labels: where the truth is among a pixel's candidates it
/// is taken as predicted, elsewhere the logits-based choice stands.
pub fn loose_labels(set: &MaskSet, truth: &LabelMap) -> Result<LabelMap> {
    if truth.height != set.height || truth.width != set.width {
        return Err(Error::Shape("truth and masks differ in size".into()));
    }
    let fallback = fuse(set, Strategy::Logits, 0)?;
    let labels = set
        .claimant_sets()
        .iter()
        .enumerate()
        .map(|(p, cands)| {
            if cands.contains(&truth.labels[p]) {
                truth.labels[p]
            } else {
                fallback.labels[p]
            }
        })
        .collect();
    LabelMap::new(set.height, set.width, labels)
}

/// Background mass in the cascade distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackgroundRule {
    /// Product of every predicted class's background probability.
    #[default]
    Product,
    /// One minus the largest foreground probability.
    OneMinusMaxFg,
}

/// Normalized per-pixel distribution over `[background, classes...]` with
/// class terms `fg_c · P(Z_c = 1 | x)` and background existence fixed to 1.
pub fn cascade_distribution(existence: &[f64], fg: &[f64], rule: BackgroundRule) -> Result<Vec<f64>> {
    if existence.len() != fg.len() {
        return Err(Error::Shape(format!("{} existences, {} planes", existence.len(), fg.len())));
    }
    let background = match rule {
        BackgroundRule::Product => fg.iter().map(|f| 1.0 - f).product(),
        BackgroundRule::OneMinusMaxFg => 1.0 - fg.iter().copied().fold(0.0, f64::max),
    };
    let mut out = Vec::with_capacity(fg.len() + 1);
    out.push(background);
    out.extend(existence.iter().zip(fg).map(|(e, f)| e * f));
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        out.iter_mut().for_each(|v| *v /= total);
    } else {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[0] = 1.0;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub existence: Option<ExistenceVector>,
    /// Classes whose segmenter ran, ascending.
    pub activated: Vec<u16>,
    pub masks: MaskSet,
    /// `None` for the loose strategy, which needs ground truth.
    pub labels: Option<LabelMap>,
}

/// Router and masks for one feature map. Only segmenters of the selected
/// classes run; the oracle mode never calls the router.
pub fn run_cascade(model: &CascadeModel, features: &Tensor, selection: Selection, mode: &Mode) -> Result<Prediction> {
    selection.validate()?;
    if model.heads().is_empty() {
        return Err(Error::Precondition("no classes learned".into()));
    }
    let (existence, activated) = match mode {
        Mode::Full => {
            let ev = ExistenceVector {
                classes: model.classes(),
                probs: model.route(features)?,
            };
            let picked = ev.select(selection)?;
            (Some(ev), picked)
        }
        Mode::SegmentationOnly => {
            let mut all = model.classes();
            all.sort_unstable();
            (None, all)
        }
        Mode::Oracle(present) => {
            let learned = model.classes();
            let mut picked: Vec<u16> = present.iter().copied().filter(|c| learned.contains(c)).collect();
            picked.sort_unstable();
            picked.dedup();
            (None, picked)
        }
    };
    let shape = features.shape();
    let (height, width) = (shape[1] * model::STRIDE, shape[2] * model::STRIDE);
    let masks = activated
        .iter()
        .map(|&c| {
            let (_, fg) = model.segment(features, c)?;
            Ok(ClassMask { class: c, fg })
        })
        .collect::<Result<_>>()?;
    Ok(Prediction {
        existence,
        activated,
        masks: MaskSet { height, width, masks },
        labels: None,
    })
}

/// Full per-image prediction with a deployable fusion strategy.
pub fn predict(
    model: &CascadeModel,
    features: &Tensor,
    selection: Selection,
    strategy: Strategy,
    mode: &Mode,
    fusion_seed: u64,
) -> Result<Prediction> {
    if strategy == Strategy::Loose {
        return Err(Error::LooseNotDeployable);
    }
    let mut pred = run_cascade(model, features, selection, mode)?;
    pred.labels = Some(fuse(&pred.masks, strategy, fusion_seed)?);
    Ok(pred)
}

/// Per-pixel argmax of the monolithic head, as class ids.
pub fn predict_baseline(model: &MonolithicModel, features: &Tensor) -> Result<LabelMap> {
    let probs = model.forward(features)?;
    let shape = probs.shape();
    let (k, h, w) = (shape[0], shape[1], shape[2]);
    let order = model.channel_classes();
    let data = probs.data();
    let labels = (0..h * w)
        .map(|p| {
            let mut best = 0;
            for ch in 1..k {
                if data[ch * h * w + p] > data[best * h * w + p] {
                    best = ch;
                }
            }
            order[best]
        })
        .collect();
    LabelMap::new(h, w, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(masks: Vec<(u16, Vec<f64>)>) -> MaskSet {
        MaskSet {
            height: 1,
            width: masks[0].1.len(),
            masks: masks.into_iter().map(|(class, fg)| ClassMask { class, fg }).collect(),
        }
    }

    #[test]
    fn disjoint_masks_fuse_identically() {
        let s = set(vec![(1, vec![0.9, 0.1, 0.2]), (2, vec![0.1, 0.2, 0.8])]);
        let reference = fuse(&s, Strategy::Logits, 0).unwrap();
        assert_eq!(reference.labels, vec![1, 0, 2]);
        for st in [Strategy::Random, Strategy::Strict, Strategy::Distributed] {
            assert_eq!(fuse(&s, st, 7).unwrap(), reference);
        }
    }

    #[test]
    fn overlap_resolution() {
        let s = set(vec![(1, vec![0.9]), (2, vec![0.6])]);
        assert_eq!(fuse(&s, Strategy::Logits, 0).unwrap().labels, vec![1]);
        assert_eq!(fuse(&s, Strategy::Strict, 0).unwrap().labels, vec![0]);
        assert!(matches!(fuse(&s, Strategy::Loose, 0), Err(Error::LooseNotDeployable)));
    }

    #[test]
    fn distributed_prefers_smaller_area() {
        // A claims {0,1}, B claims {1,2}: equal areas, lower id wins.
        let tie = set(vec![(3, vec![0.9, 0.9, 0.0]), (5, vec![0.0, 0.9, 0.9])]);
        assert_eq!(fuse(&tie, Strategy::Distributed, 0).unwrap().labels, vec![3, 3, 5]);
        // A claims {0,1}, B claims {1,2,3}: A is smaller.
        let a_small = set(vec![(5, vec![0.9, 0.9, 0.0, 0.0]), (3, vec![0.0, 0.9, 0.9, 0.9])]);
        assert_eq!(fuse(&a_small, Strategy::Distributed, 0).unwrap().labels, vec![5, 5, 3, 3]);
    }

    #[test]
    fn loose_takes_truth_among_claimants() {
        let s = set(vec![(1, vec![0.9, 0.9]), (2, vec![0.6, 0.7])]);
        let truth = LabelMap::new(1, 2, vec![2, 0]).unwrap();
        assert_eq!(loose_labels(&s, &truth).unwrap().labels, vec![2, 0]);
        let other = LabelMap::new(1, 2, vec![4, 4]).unwrap();
        assert_eq!(loose_labels(&s, &other).unwrap().labels, vec![1, 1]);
    }

    #[test]
    fn cascade_distribution_cases() {
        let d = cascade_distribution(&[0.9, 0.9], &[0.8, 0.6], BackgroundRule::Product).unwrap();
        let total = 0.72 + 0.54 + 0.08;
        let expected = [0.08 / total, 0.72 / total, 0.54 / total];
        for (a, b) in d.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let killed = cascade_distribution(&[0.0, 0.7], &[0.99, 0.4], BackgroundRule::Product).unwrap();
        assert_eq!(killed[1], 0.0);
        let alt = cascade_distribution(&[0.9, 0.9], &[0.8, 0.6], BackgroundRule::OneMinusMaxFg).unwrap();
        assert!((alt[0] - 0.2 / (0.2 + 0.72 + 0.54)).abs() < 1e-15);
        let win = cascade_distribution(&[1.0], &[1.0], BackgroundRule::Product).unwrap();
        assert_eq!(win, vec![0.0, 1.0]);
    }

    #[test]
    fn selection_rules() {
        let ev = ExistenceVector {
            classes: vec![4, 1, 2],
            probs: vec![0.7, 0.2, 0.5],
        };
        assert_eq!(ev.select(Selection::Threshold(0.5)).unwrap(), vec![2, 4]);
        assert_eq!(ev.select(Selection::TopK(1)).unwrap(), vec![4]);
        assert!(matches!(ev.select(Selection::Threshold(1.5)), Err(Error::Threshold(_))));
        assert_eq!(ev.select(Selection::Threshold(0.9)).unwrap(), Vec::<u16>::new());
    }
}
