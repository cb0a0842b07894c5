//! Reverse-mode gradients of every loss and layer against central
//! differences, on small random instances.

use cogcas_autodiff::{gradient_error, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{self, LossConfig};
use crate::model::{self, Arch, MonolithicModel};
use crate::seed;

pub const STEP: f64 = 1e-5;

/// Worst relative gradient error of one case over its instances.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

/// Parameters `theta` plus fixed data (targets, weights) for one instance.
type Sample = Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>)>;
type Build = Box<dyn Fn(&mut Tape, &[f64], &[f64]) -> Result<Var>>;

struct Case {
    name: &'static str,
    sample: Sample,
    build: Build,
}

const SIDE: usize = 4;
const PLANE: usize = SIDE * SIDE;

fn small_arch() -> Arch {
    Arch {
        stem_channels: 2,
        feature_channels: 3,
        hidden: 2,
        baseline_hidden: 2,
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn bits(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.4)))).collect()
}

fn onehot(rng: &mut ChaCha8Rng, channels: usize, plane: usize) -> Vec<f64> {
    let mut v = vec![0.0; channels * plane];
    for p in 0..plane {
        v[rng.gen_range(0..channels) * plane + p] = 1.0;
    }
    v
}

fn leaf(tape: &mut Tape, theta: &[f64], offset: usize, shape: &[usize]) -> Result<Var> {
    let n: usize = shape.iter().product();
    Ok(tape.param(Tensor::new(shape.to_vec(), theta[offset..offset + n].to_vec())?, offset))
}

/// Contract with fixed weights so the whole Jacobian is exercised.
fn weighted_sum(tape: &mut Tape, v: Var, weights: &[f64]) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let w = tape.input(Tensor::new(shape, weights.to_vec())?);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p)?)
}

/// Foreground probability map `[H, W]` from free logits.
fn prob_map(tape: &mut Tape, theta: &[f64]) -> Result<Var> {
    let z = leaf(tape, theta, 0, &[SIDE, SIDE])?;
    Ok(tape.sigmoid(z)?)
}

fn loss_cases() -> Vec<Case> {
    let cfg = LossConfig::default();
    let cfg2 = cfg;
    vec![
        Case {
            name: "bce",
            sample: Box::new(|r| (uniform(r, 1, 4.0), bits(r, 1))),
            build: Box::new(|t, th, aux| {
                let z = leaf(t, th, 0, &[1])?;
                let p = t.sigmoid(z)?;
                losses::bce(t, p, aux[0])
            }),
        },
        Case {
            name: "bce_multilabel",
            sample: Box::new(|r| (uniform(r, 6, 4.0), bits(r, 6))),
            build: Box::new(|t, th, aux| {
                let mut probs = Vec::new();
                for img in 0..2 {
                    let mut row = Vec::new();
                    for c in 0..3 {
                        let z = leaf(t, th, img * 3 + c, &[1])?;
                        row.push(t.sigmoid(z)?);
                    }
                    probs.push(row);
                }
                let targets = vec![aux[..3].to_vec(), aux[3..].to_vec()];
                losses::bce_multilabel(t, &probs, &targets)
            }),
        },
        Case {
            name: "focal",
            sample: Box::new(|r| (uniform(r, PLANE, 3.0), bits(r, PLANE))),
            build: Box::new(|t, th, aux| {
                let p = prob_map(t, th)?;
                losses::focal(t, p, aux, 0.25, 2.0)
            }),
        },
        Case {
            name: "focal_logits",
            sample: Box::new(|r| (uniform(r, 2 * PLANE, 6.0), bits(r, PLANE))),
            build: Box::new(|t, th, aux| {
                let z = leaf(t, th, 0, &[2, SIDE, SIDE])?;
                losses::focal_logits(t, z, aux, 0.25, 2.0)
            }),
        },
        Case {
            name: "dice",
            sample: Box::new(|r| (uniform(r, PLANE, 3.0), bits(r, PLANE))),
            build: Box::new(|t, th, aux| {
                let p = prob_map(t, th)?;
                losses::dice(t, p, aux, 1.0)
            }),
        },
        Case {
            name: "seg_loss",
            sample: Box::new(|r| (uniform(r, PLANE, 3.0), bits(r, PLANE))),
            build: Box::new(move |t, th, aux| {
                let p = prob_map(t, th)?;
                losses::seg_loss(t, p, aux, &cfg)
            }),
        },
        Case {
            name: "seg_loss_logits",
            sample: Box::new(|r| (uniform(r, 2 * PLANE, 6.0), bits(r, PLANE))),
            build: Box::new(move |t, th, aux| {
                let z = leaf(t, th, 0, &[2, SIDE, SIDE])?;
                losses::seg_loss_logits(t, z, aux, &cfg2)
            }),
        },
        Case {
            name: "total_loss",
            sample: Box::new(|r| {
                let lambda = r.gen_range(0.1..3.0);
                (uniform(r, 2, 2.0), vec![lambda])
            }),
            build: Box::new(|t, th, aux| {
                let a = leaf(t, th, 0, &[1])?;
                let b = leaf(t, th, 1, &[1])?;
                let cls = t.mul(a, a)?;
                let seg = t.mul(b, a)?;
                losses::total_loss(t, cls, seg, aux[0])
            }),
        },
        Case {
            name: "pixel_ce_logits",
            sample: Box::new(|r| (uniform(r, 3 * PLANE, 6.0), onehot(r, 3, PLANE))),
            build: Box::new(|t, th, aux| {
                let z = leaf(t, th, 0, &[3, SIDE, SIDE])?;
                losses::pixel_ce_logits(t, z, aux)
            }),
        },
    ]
}

fn layer_cases() -> Vec<Case> {
    let a = small_arch();
    let f = a.feature_channels;
    let half = SIDE / 2;
    let fmap = f * half * half;
    let mut baseline = MonolithicModel::new(a, 1).expect("baseline layout");
    baseline.add_classes(1, &[1, 2]).expect("baseline classes");
    let blen = baseline.store.len();
    vec![
        Case {
            name: "stem",
            sample: Box::new(move |r| {
                let n = 3 * PLANE + a.stem_len();
                (uniform(r, n, 1.0), uniform(r, a.stem_channels * half * half, 1.0))
            }),
            build: Box::new(move |t, th, aux| {
                let img = leaf(t, th, a.stem_len(), &[3, SIDE, SIDE])?;
                let h = model::stem_on_tape(t, &a, th, 0, img)?;
                weighted_sum(t, h, aux)
            }),
        },
        Case {
            name: "tail",
            sample: Box::new(move |r| {
                let n = a.tail_len() + a.stem_channels * half * half;
                (uniform(r, n, 1.0), uniform(r, fmap, 1.0))
            }),
            build: Box::new(move |t, th, aux| {
                let x = leaf(t, th, a.tail_len(), &[a.stem_channels, half, half])?;
                let h = model::tail_on_tape(t, &a, th, 0, x)?;
                weighted_sum(t, h, aux)
            }),
        },
        Case {
            name: "router",
            sample: Box::new(move |r| (uniform(r, a.router_len() + f, 1.5), bits(r, 1))),
            build: Box::new(move |t, th, aux| {
                let pooled = leaf(t, th, a.router_len(), &[f])?;
                let z = model::router_logit(t, &a, th, 0, pooled)?;
                let p = t.sigmoid(z)?;
                losses::bce(t, p, aux[0])
            }),
        },
        Case {
            name: "segmenter",
            sample: Box::new(move |r| (uniform(r, a.segmenter_len() + fmap, 1.0), uniform(r, 2 * PLANE, 1.0))),
            build: Box::new(move |t, th, aux| {
                let x = leaf(t, th, a.segmenter_len(), &[f, half, half])?;
                let z = model::segmenter_logits(t, &a, th, 0, x)?;
                weighted_sum(t, z, aux)
            }),
        },
        Case {
            name: "segmenter_probs",
            sample: Box::new(move |r| (uniform(r, a.segmenter_len() + fmap, 1.0), uniform(r, 2 * PLANE, 1.0))),
            build: Box::new(move |t, th, aux| {
                let x = leaf(t, th, a.segmenter_len(), &[f, half, half])?;
                let p = model::segmenter_probs(t, &a, th, 0, x)?;
                weighted_sum(t, p, aux)
            }),
        },
        Case {
            name: "baseline_head",
            sample: Box::new(move |r| (uniform(r, blen + fmap, 1.0), onehot(r, 3, PLANE))),
            build: Box::new(move |t, th, aux| {
                let x = leaf(t, th, blen, &[f, half, half])?;
                let z = baseline.logits_on_tape(t, th, x)?;
                losses::pixel_ce_logits(t, z, aux)
            }),
        },
    ]
}

/// Run every case on `instances` random draws. Results are in a fixed
/// order: losses first, then layers.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for (i, case) in loss_cases().into_iter().chain(layer_cases()).enumerate() {
        let mut rng = seed::rng(&[seed, seed::domain::PROBE, 100, i as u64]);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let (theta, aux) = (case.sample)(&mut rng);
            let e = gradient_error(|t, th| (case.build)(t, th, &aux), &theta, STEP)?;
            worst = worst.max(e);
        }
        out.push(CaseResult {
            name: case.name,
            instances,
            worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_builds_a_scalar() {
        let mut rng = seed::rng(&[0]);
        for case in loss_cases().into_iter().chain(layer_cases()) {
            let (theta, aux) = (case.sample)(&mut rng);
            let mut tape = Tape::new();
            let v = (case.build)(&mut tape, &theta, &aux).unwrap();
            assert_eq!(tape.value(v).len(), 1, "{}", case.name);
            assert!(tape.value(v).item().is_finite(), "{}", case.name);
        }
    }
}
