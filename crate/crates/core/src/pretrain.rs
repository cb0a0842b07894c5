//! Brief supervised pretraining of the backbone on an auxiliary image set,
//! done once before any continual task is seen. The backbone is frozen
//! afterwards.

use cogcas_autodiff::{Tape, Tensor};

use crate::error::Result;
use crate::losses;
use crate::model::{self, Arch, STRIDE};
use crate::objective::Objective;
use crate::seed::{self, domain};
use crate::synth::{generate_benchmark, BenchmarkSpec, LabelMap};
use crate::trainer::{run_epochs, OptimizerChoice, Schedule};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    /// Auxiliary images to render; they never appear in any task.
    pub images: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Class palette of the auxiliary images; 0 reuses the benchmark's.
    pub classes: usize,
    /// Weight of the per-pixel term; 0 leaves image-level presence only.
    pub pixel_weight: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            images: 600,
            epochs: 40,
            lr: 2e-2,
            batch_size: 4,
            classes: 0,
            pixel_weight: 1.0,
        }
    }
}

/// Per-pixel cross-entropy of `stem → tail → 1×1 classifier` against the
/// full ground truth of the auxiliary images, plus image-level presence
/// BCE of a linear probe on the pooled features.
struct PixelObjective<'a> {
    arch: Arch,
    classes: usize,
    pixel_weight: f64,
    items: Vec<(Tensor, &'a LabelMap)>,
}

impl PixelObjective<'_> {
    fn classifier_offset(&self) -> usize {
        self.arch.stem_len() + self.arch.tail_len()
    }

    fn probe_offset(&self) -> usize {
        self.classifier_offset() + self.classes * (self.arch.feature_channels + 1)
    }

    fn len_params(&self) -> usize {
        self.probe_offset() + (self.classes - 1) * (self.arch.feature_channels + 1)
    }
}

impl Objective for PixelObjective<'_> {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn eval(&self, params: &[f64], i: usize, grad: Option<&mut [f64]>) -> Result<f64> {
        let (image, truth) = &self.items[i];
        let a = &self.arch;
        let mut tape = Tape::new();
        let x = tape.input(image.clone());
        let h = model::stem_on_tape(&mut tape, a, params, 0, x)?;
        let f = model::tail_on_tape(&mut tape, a, params, a.stem_len(), h)?;
        let pooled = tape.mean_spatial(f)?;
        let mut presence = Vec::with_capacity(self.classes - 1);
        for c in 1..self.classes {
            let off = self.probe_offset() + (c - 1) * (a.feature_channels + 1);
            let z = model::router_logit(&mut tape, a, params, off, pooled)?;
            let p = tape.sigmoid(z)?;
            presence.push(losses::bce(&mut tape, p, f64::from(u8::from(truth.contains(c as u16))))?);
        }
        let presence = losses::sum_all(&mut tape, &presence)?;
        let (z, _) = model::conv_layer(&mut tape, params, self.classifier_offset(), f, self.classes, a.feature_channels, 1, 1)?;
        let z = tape.upsample_bilinear(z, STRIDE)?;
        let plane = truth.labels.len();
        let mut onehot = vec![0.0; self.classes * plane];
        for (px, &l) in truth.labels.iter().enumerate() {
            onehot[l as usize * plane + px] = 1.0;
        }
        let pixel = losses::pixel_ce_logits(&mut tape, z, &onehot)?;
        let pixel = tape.scale(pixel, self.pixel_weight)?;
        let loss = tape.add(pixel, presence)?;
        if let Some(g) = grad {
            tape.backward(loss, None)?.accumulate_into(g);
        }
        Ok(tape.value(loss).item())
    }
}

/// Train stem and tail (plus a throwaway pixel classifier) on images
/// rendered from `benchmark` under an independent seed. Returns the
/// backbone blocks and the final epoch's mean loss.
pub fn pretrain_backbone(arch: &Arch, benchmark: &BenchmarkSpec, cfg: &PretrainConfig, seed: u64) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let palette = if cfg.classes == 0 { benchmark.num_classes } else { cfg.classes };
    let aux_spec = BenchmarkSpec {
        seed: seed::mix(&[benchmark.seed, domain::PRETRAIN, seed]),
        num_classes: palette,
        first_task: palette,
        task_step: 1,
        images_per_task: cfg.images,
        train_fraction: 0.95,
        ..benchmark.clone()
    };
    let aux = generate_benchmark(&aux_spec)?;
    let classes = palette + 1;
    let (stem, tail) = model::init_backbone(arch, seed);
    let mut rng = seed::rng(&[seed, domain::PRETRAIN]);
    let bound = (6.0 / arch.feature_channels as f64).sqrt();
    let mut params = stem;
    params.extend(tail);
    params.extend((0..classes * arch.feature_channels).map(|_| rand::Rng::gen_range(&mut rng, -bound..bound)));
    params.extend(std::iter::repeat(0.0).take(classes));
    let probe = (classes - 1) * (arch.feature_channels + 1);

    let obj = PixelObjective {
        arch: *arch,
        classes,
        pixel_weight: cfg.pixel_weight,
        items: aux.tasks[0].train.iter().map(|s| (s.image.to_tensor(), &s.truth)).collect(),
    };
    params.extend((0..probe).map(|_| rand::Rng::gen_range(&mut rng, -bound..bound)));
    debug_assert_eq!(params.len(), obj.len_params());
    let sched = Schedule {
        epochs: cfg.epochs,
        router_only_epochs: 0,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        optimizer: OptimizerChoice::Adam,
        weight_decay: 0.0,
        seed: seed::mix(&[seed, domain::PRETRAIN]),
        ..Schedule::default()
    };
    let trainable = vec![true; params.len()];
    let records = run_epochs(&obj, &mut params, &trainable, &sched, 0..cfg.epochs, &[sched.seed], 0, "pretrain", &mut |_| {})?;
    let last = records.last().map_or(f64::NAN, |r| r.loss);
    let tail_start = arch.stem_len();
    let tail_end = tail_start + arch.tail_len();
    Ok((params[..tail_start].to_vec(), params[tail_start..tail_end].to_vec(), last))
}
