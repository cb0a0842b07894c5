//! Training lifecycles: isolated continual training, joint training, and
//! the naive and orthogonal-gradient baselines.

use std::fmt::Write as _;
use std::ops::Range;

use cogcas_autodiff::{CosineSchedule, Optimizer, OptimizerKind, Tape, Tensor};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{self, CascadeModel, ClassHeads, MonolithicModel, TAIL};
use crate::objective::{
    mean_loss_grad, batch_loss_grad, BaselineObjective, Composite, FeatureInput, Net, Objective,
    RouterObjective, SegmenterObjective,
};
use crate::seed::{self, domain};
use crate::synth::{build_near_ood, Sample, TaskStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerChoice {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    /// Leading epochs in which only routers train.
    pub router_only_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerChoice,
    pub momentum: f64,
    pub weight_decay: f64,
    pub cosine: bool,
    pub seed: u64,
    /// Gradient infinity-norm at which a task counts as converged.
    pub conv_tol: f64,
    /// Full-batch refinement steps allowed after the epochs.
    pub polish_steps: usize,
    pub near_ood_ratio: f64,
    /// Largest L2 norm of a minibatch gradient; 0 disables clipping.
    pub clip_norm: f64,
    /// Run independent head jobs on the thread pool.
    pub parallel: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 60,
            router_only_epochs: 1,
            batch_size: 20,
            lr: 0.05,
            optimizer: OptimizerChoice::SgdMomentum,
            momentum: 0.9,
            weight_decay: 1e-4,
            cosine: true,
            seed: 0,
            conv_tol: 1e-3,
            polish_steps: 0,
            near_ood_ratio: 1.0,
            clip_norm: 1.0,
            parallel: true,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.router_only_epochs > self.epochs {
            return Err(Error::Config(format!(
                "{} router-only epochs exceed {} epochs",
                self.router_only_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.conv_tol > 0.0) || !(self.near_ood_ratio > 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("batch size, learning rate, tolerance and near-OOD ratio must be positive".into()));
        }
        Ok(())
    }

    fn optimizer(&self, len: usize) -> Optimizer {
        let kind = match self.optimizer {
            OptimizerChoice::SgdMomentum => OptimizerKind::sgd(self.momentum, self.weight_decay),
            OptimizerChoice::Adam => OptimizerKind::adam(self.weight_decay),
        };
        Optimizer::new(kind, self.lr, len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub task: usize,
    pub epoch: usize,
    pub phase: String,
    pub loss: f64,
    /// Infinity-norm of the epoch's mean minibatch gradient.
    pub grad_norm: f64,
}

/// Convergence evidence recorded when a task's snapshot is taken.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskWitness {
    pub task: usize,
    pub grad_norm: f64,
    pub tolerance: f64,
    pub converged: bool,
    pub polish_steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub tasks: Vec<TaskWitness>,
    pub warnings: Vec<String>,
    /// Largest |<update, stored direction>| seen by the baseline trainers.
    pub max_direction_product: f64,
}

impl RunRecord {
    pub fn to_text(&self) -> String {
        let mut out = String::from("task,epoch,phase,loss,grad_norm\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{:e},{:e}", e.task, e.epoch, e.phase, e.loss, e.grad_norm);
        }
        out.push_str("\ntask,grad_norm,tolerance,converged,polish_steps\n");
        for w in &self.tasks {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{},{}",
                w.task, w.grad_norm, w.tolerance, w.converged, w.polish_steps
            );
        }
        if !self.warnings.is_empty() {
            out.push('\n');
            for w in &self.warnings {
                let _ = writeln!(out, "warning: {w}");
            }
        }
        out
    }
}

/// Backbone outputs for every sample of a stream, cached once.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    pub train_stem: Vec<Vec<Tensor>>,
    pub val_stem: Vec<Vec<Tensor>>,
    pub train: Vec<Vec<Tensor>>,
    pub val: Vec<Vec<Tensor>>,
}

impl FeatureBank {
    pub fn build(model: &CascadeModel, stream: &TaskStream) -> Result<Self> {
        let stems = |samples: &[Sample]| -> Result<Vec<Tensor>> {
            samples
                .par_iter()
                .map(|s| model::stem_forward(&model.arch, model.stem(), &s.image))
                .collect()
        };
        let train_stem: Vec<Vec<Tensor>> = stream.tasks.iter().map(|t| stems(&t.train)).collect::<Result<_>>()?;
        let val_stem: Vec<Vec<Tensor>> = stream.tasks.iter().map(|t| stems(&t.val)).collect::<Result<_>>()?;
        let mut bank = Self {
            train: Vec::new(),
            val: Vec::new(),
            train_stem,
            val_stem,
        };
        bank.refresh(model, model.tail());
        Ok(bank)
    }

    /// Recompute features from the cached stem outputs with `tail`.
    pub fn refresh(&mut self, model: &CascadeModel, tail: &[f64]) {
        let run = |stems: &Vec<Vec<Tensor>>| -> Vec<Vec<Tensor>> {
            stems
                .iter()
                .map(|task| task.par_iter().map(|s| model::tail_forward(&model.arch, tail, s)).collect())
                .collect()
        };
        self.train = run(&self.train_stem);
        self.val = run(&self.val_stem);
    }

    /// Features of every validation sample, in task order.
    pub fn all_val(&self) -> Vec<&Tensor> {
        self.val.iter().flatten().collect()
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Which coordinates a job may move.
fn trainable_mask(len: usize, frozen: &[bool], ranges: &[Range<usize>]) -> Vec<bool> {
    let mut mask = vec![false; len];
    for r in ranges {
        for i in r.clone() {
            mask[i] = !frozen[i];
        }
    }
    mask
}

/// Minibatch training of one objective over the coordinates in `trainable`.
/// `hook` sees each proposed update before it is applied.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_epochs(
    obj: &dyn Objective,
    params: &mut [f64],
    trainable: &[bool],
    sched: &Schedule,
    epochs: Range<usize>,
    seed_parts: &[u64],
    task: usize,
    phase: &str,
    hook: &mut dyn FnMut(&mut [f64]),
) -> Result<Vec<EpochRecord>> {
    let n = obj.len();
    if n == 0 || epochs.is_empty() {
        return Ok(Vec::new());
    }
    let frozen: Vec<bool> = trainable.iter().map(|t| !t).collect();
    let mut opt = sched.optimizer(params.len());
    let per_epoch = n.div_ceil(sched.batch_size);
    let cosine = CosineSchedule {
        base: sched.lr,
        total_steps: per_epoch * epochs.len(),
    };
    let mut records = Vec::with_capacity(epochs.len());
    let mut step = 0;
    for epoch in epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut parts = vec![domain::SHUFFLE, epoch as u64];
        parts.extend_from_slice(seed_parts);
        order.shuffle(&mut seed::rng(&parts));
        let mut epoch_loss = 0.0;
        let mut epoch_grad = vec![0.0; params.len()];
        for batch in order.chunks(sched.batch_size) {
            let (loss, mut grad) = batch_loss_grad(obj, params, batch)?;
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            epoch_loss += loss;
            for (a, (&g, &t)) in epoch_grad.iter_mut().zip(grad.iter().zip(trainable)) {
                if t {
                    *a += g;
                }
            }
            if sched.clip_norm > 0.0 {
                let norm = grad.iter().zip(trainable).filter(|(_, &t)| t).map(|(g, _)| g * g).sum::<f64>().sqrt();
                if norm > sched.clip_norm {
                    let k = sched.clip_norm / norm;
                    grad.iter_mut().for_each(|g| *g *= k);
                }
            }
            if sched.cosine {
                opt.set_lr(cosine.lr(step));
            }
            opt.step_with(params, &grad, &frozen, &mut *hook)?;
            step += 1;
        }
        records.push(EpochRecord {
            task,
            epoch: epoch + 1,
            phase: phase.to_string(),
            loss: epoch_loss / n as f64,
            grad_norm: inf_norm(&epoch_grad) / per_epoch as f64,
        });
    }
    Ok(records)
}

/// Full-batch gradient descent with Barzilai–Borwein steps and an Armijo
/// safeguard, run until the trainable gradient's infinity-norm drops to
/// `tol` or `max_steps` is spent. Returns the final norm and steps used.
pub fn polish(
    loss_grad: &dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
    loss_only: &dyn Fn(&[f64]) -> Result<f64>,
    params: &mut [f64],
    trainable: &[bool],
    tol: f64,
    max_steps: usize,
) -> Result<(f64, usize)> {
    let masked = |g: &mut Vec<f64>| {
        for (v, &t) in g.iter_mut().zip(trainable) {
            if !t {
                *v = 0.0;
            }
        }
    };
    let (mut loss, mut grad) = loss_grad(params)?;
    masked(&mut grad);
    let mut alpha: f64 = 1e-2;
    let mut steps = 0;
    while inf_norm(&grad) > tol && steps < max_steps {
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        let mut trial = params.to_vec();
        let mut accepted = false;
        for _ in 0..40 {
            for ((t, &p), (&g, &m)) in trial.iter_mut().zip(params.iter()).zip(grad.iter().zip(trainable)) {
                if m {
                    *t = p - alpha * g;
                }
            }
            let l = loss_only(&trial)?;
            if l <= loss - 1e-4 * alpha * g2 {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        let (new_loss, mut new_grad) = loss_grad(&trial)?;
        masked(&mut new_grad);
        let mut sy = 0.0;
        let mut ss = 0.0;
        for i in 0..params.len() {
            let s = trial[i] - params[i];
            sy += s * (new_grad[i] - grad[i]);
            ss += s * s;
        }
        alpha = if sy > 0.0 { (ss / sy).min(1e3) } else { alpha * 2.0 };
        params.copy_from_slice(&trial);
        loss = new_loss;
        grad = new_grad;
        steps += 1;
    }
    Ok((inf_norm(&grad), steps))
}

/// Options that bend isolated training for diagnostic runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SpiOptions {
    /// Leave the backbone's tail layer trainable (a deliberate violation
    /// of isolation). Forces sequential head jobs.
    pub train_tail: bool,
}

enum Job<'a> {
    Router(RouterObjective<'a>),
    Segmenter(SegmenterObjective<'a>),
}

impl Job<'_> {
    fn objective(&self) -> &dyn Objective {
        match self {
            Job::Router(o) => o,
            Job::Segmenter(o) => o,
        }
    }

    fn ranges(&self, arch: &model::Arch) -> Vec<Range<usize>> {
        match self {
            Job::Router(o) => o
                .heads
                .iter()
                .map(|h| h.router..h.router + arch.router_len())
                .collect(),
            Job::Segmenter(o) => vec![o.head.segmenter..o.head.segmenter + arch.segmenter_len()],
        }
    }

    fn phase(&self) -> String {
        match self {
            Job::Router(_) => "router".into(),
            Job::Segmenter(o) => format!("seg.c{}", o.head.class),
        }
    }

    fn seed_key(&self) -> u64 {
        match self {
            Job::Router(_) => 0,
            Job::Segmenter(o) => u64::from(o.head.class),
        }
    }

    fn weight(&self, loss: &LossConfig) -> f64 {
        match self {
            Job::Router(_) => 1.0,
            Job::Segmenter(_) => loss.lambda,
        }
    }
}

fn input<'a>(train_tail: bool, features: &'a Tensor, stem: &'a Tensor) -> FeatureInput<'a> {
    if train_tail {
        FeatureInput::Tail(stem)
    } else {
        FeatureInput::Fixed(features)
    }
}

struct JobResult {
    params: Vec<f64>,
    records: Vec<EpochRecord>,
    grad_norm: f64,
    polish_steps: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_job(
    job: &Job<'_>,
    mut params: Vec<f64>,
    frozen: &[bool],
    extra: &[Range<usize>],
    arch: &model::Arch,
    sched: &Schedule,
    loss_cfg: &LossConfig,
    task: usize,
) -> Result<JobResult> {
    let mut ranges = job.ranges(arch);
    ranges.extend(extra.iter().cloned());
    let trainable = trainable_mask(params.len(), frozen, &ranges);
    let first = match job {
        Job::Router(_) => 0,
        Job::Segmenter(_) => sched.router_only_epochs,
    };
    let seed_parts = [sched.seed, task as u64, job.seed_key()];
    let records = run_epochs(
        job.objective(),
        &mut params,
        &trainable,
        sched,
        first..sched.epochs,
        &seed_parts,
        task,
        &job.phase(),
        &mut |_| {},
    )?;
    let obj = job.objective();
    let w = job.weight(loss_cfg);
    let lg = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (l, mut g) = mean_loss_grad(obj, p)?;
        g.iter_mut().for_each(|v| *v *= w);
        Ok((w * l, g))
    };
    let lo = |p: &[f64]| -> Result<f64> { Ok(w * crate::objective::mean_loss(obj, p)?) };
    let (grad_norm, polish_steps) = polish(&lg, &lo, &mut params, &trainable, sched.conv_tol, sched.polish_steps)?;
    Ok(JobResult {
        params,
        records,
        grad_norm,
        polish_steps,
    })
}

fn presence(sample: &Sample, classes: &[u16], use_truth: bool) -> Vec<f64> {
    let map = if use_truth { &sample.truth } else { &sample.label };
    classes.iter().map(|&c| f64::from(u8::from(map.contains(c)))).collect()
}

/// Train task `t` of the stream under strict parameter isolation: new
/// router and segmenter blocks for each class of the task, everything
/// else frozen. Records the snapshot for task `t`.
#[allow(clippy::too_many_arguments)]
pub fn train_task_spi(
    model: &mut CascadeModel,
    stream: &TaskStream,
    bank: &FeatureBank,
    t: usize,
    sched: &Schedule,
    loss_cfg: &LossConfig,
    options: SpiOptions,
    record: &mut RunRecord,
) -> Result<()> {
    sched.validate()?;
    loss_cfg.validate()?;
    if t == 0 || t > stream.num_tasks() {
        return Err(Error::Precondition(format!("task {t} outside the stream")));
    }
    if model.store.snapshots().keys().next_back().copied().unwrap_or(0) + 1 != t {
        return Err(Error::Precondition(format!("task {t} trained out of order")));
    }
    let task = stream.task(t);
    model.instantiate_task(t, &task.classes)?;
    if options.train_tail {
        model.store.set_frozen(TAIL, false)?;
    }
    let net = Net {
        arch: model.arch,
        tail_offset: model.tail_offset(),
    };
    let heads: Vec<ClassHeads> = task
        .classes
        .iter()
        .map(|&c| model.head(c))
        .collect::<Result<_>>()?;
    let feats = &bank.train[t - 1];
    let stems = &bank.train_stem[t - 1];
    let tt = options.train_tail;

    let mut jobs = vec![Job::Router(RouterObjective {
        net,
        heads: heads.clone(),
        items: task
            .train
            .iter()
            .enumerate()
            .map(|(i, s)| (input(tt, &feats[i], &stems[i]), presence(s, &task.classes, false)))
            .collect(),
    })];
    for h in &heads {
        let pairs = task.near_ood(h.class, sched.near_ood_ratio, sched.seed)?;
        let mut items: Vec<(FeatureInput<'_>, Option<&_>)> = task
            .train
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label.contains(h.class))
            .map(|(i, s)| (input(tt, &feats[i], &stems[i]), Some(&s.label)))
            .collect();
        items.extend(pairs.iter().map(|p| (input(tt, &feats[p.sample], &stems[p.sample]), None)));
        jobs.push(Job::Segmenter(SegmenterObjective {
            net,
            head: *h,
            loss: *loss_cfg,
            items,
        }));
    }
    run_jobs(model, &jobs, sched, loss_cfg, t, tt, record)
}

fn run_jobs(
    model: &mut CascadeModel,
    jobs: &[Job<'_>],
    sched: &Schedule,
    loss_cfg: &LossConfig,
    t: usize,
    train_tail: bool,
    record: &mut RunRecord,
) -> Result<()> {
    let frozen = model.store.frozen_mask();
    let arch = model.arch;
    let tail_range = model.store.block(TAIL)?.range();
    let mut worst: f64 = 0.0;
    let mut polish_total = 0;
    if train_tail {
        // Every job moves the shared tail, so jobs see each other's updates.
        let extra = [tail_range];
        let mut params = model.store.params().to_vec();
        for job in jobs {
            let r = run_job(job, params, &frozen, &extra, &arch, sched, loss_cfg, t)?;
            params = r.params;
            record.epochs.extend(r.records);
            worst = worst.max(r.grad_norm);
            polish_total += r.polish_steps;
        }
        model.store.commit(&params)?;
    } else {
        let base = model.store.params().to_vec();
        let run = |job: &Job<'_>| run_job(job, base.clone(), &frozen, &[], &arch, sched, loss_cfg, t);
        let results: Vec<JobResult> = if sched.parallel {
            jobs.par_iter().map(run).collect::<Result<_>>()?
        } else {
            jobs.iter().map(run).collect::<Result<_>>()?
        };
        let mut params = base.clone();
        for (job, r) in jobs.iter().zip(results) {
            for range in job.ranges(&arch) {
                params[range.clone()].copy_from_slice(&r.params[range]);
            }
            record.epochs.extend(r.records);
            worst = worst.max(r.grad_norm);
            polish_total += r.polish_steps;
        }
        model.store.commit(&params)?;
    }
    let converged = worst <= sched.conv_tol;
    if !converged {
        record.warnings.push(format!(
            "task {t}: gradient infinity-norm {worst:e} above tolerance {:e}",
            sched.conv_tol
        ));
    }
    record.tasks.push(TaskWitness {
        task: t,
        grad_norm: worst,
        tolerance: sched.conv_tol,
        converged,
        polish_steps: polish_total,
    });
    model.store.record_snapshot(t)
}

/// Joint training on the whole stream with full annotations: routers for
/// every class first, then one segmenter per class with near-OOD images
/// drawn from the complete training set. Recorded as task 1.
pub fn train_joint(
    model: &mut CascadeModel,
    stream: &TaskStream,
    bank: &FeatureBank,
    sched: &Schedule,
    loss_cfg: &LossConfig,
    record: &mut RunRecord,
) -> Result<()> {
    sched.validate()?;
    loss_cfg.validate()?;
    let classes = stream.classes_up_to(stream.num_tasks());
    model.instantiate_task(1, &classes)?;
    let net = Net {
        arch: model.arch,
        tail_offset: model.tail_offset(),
    };
    let heads: Vec<ClassHeads> = classes.iter().map(|&c| model.head(c)).collect::<Result<_>>()?;
    let samples: Vec<&Sample> = stream.all_train();
    let feats: Vec<&Tensor> = bank.train.iter().flatten().collect();
    let mut jobs = vec![Job::Router(RouterObjective {
        net,
        heads: heads.clone(),
        items: samples
            .iter()
            .zip(&feats)
            .map(|(s, f)| (FeatureInput::Fixed(*f), presence(s, &classes, true)))
            .collect(),
    })];
    for h in &heads {
        let pairs = build_near_ood(&samples, h.class, sched.near_ood_ratio, &[sched.seed, 0])?;
        let mut items: Vec<(FeatureInput<'_>, Option<&_>)> = samples
            .iter()
            .zip(&feats)
            .filter(|(s, _)| s.truth.contains(h.class))
            .map(|(s, f)| (FeatureInput::Fixed(*f), Some(&s.truth)))
            .collect();
        items.extend(pairs.iter().map(|p| (FeatureInput::Fixed(feats[p.sample]), None)));
        jobs.push(Job::Segmenter(SegmenterObjective {
            net,
            head: *h,
            loss: *loss_cfg,
            items,
        }));
    }
    run_jobs(model, &jobs, sched, loss_cfg, 1, false, record)
}

/// Task loss `L_cls + λ Σ_c L_seg,c` of task `t` on one of its splits,
/// restricted to the task's own classes. Segmenter terms use every image
/// of the split, with class-free images as all-background targets.
pub fn task_objective<'a>(
    model: &CascadeModel,
    stream: &'a TaskStream,
    bank: &'a FeatureBank,
    t: usize,
    validation: bool,
    loss_cfg: &LossConfig,
    train_tail: bool,
) -> Result<Composite<'a>> {
    let task = stream.task(t);
    let (samples, feats, stems) = if validation {
        (&task.val, &bank.val[t - 1], &bank.val_stem[t - 1])
    } else {
        (&task.train, &bank.train[t - 1], &bank.train_stem[t - 1])
    };
    let net = Net {
        arch: model.arch,
        tail_offset: model.tail_offset(),
    };
    let heads: Vec<ClassHeads> = task.classes.iter().map(|&c| model.head(c)).collect::<Result<_>>()?;
    let mut parts: Vec<(f64, Box<dyn Objective + 'a>)> = vec![(
        1.0,
        Box::new(RouterObjective {
            net,
            heads: heads.clone(),
            items: samples
                .iter()
                .enumerate()
                .map(|(i, s)| (input(train_tail, &feats[i], &stems[i]), presence(s, &task.classes, validation)))
                .collect(),
        }),
    )];
    for h in heads {
        parts.push((
            loss_cfg.lambda,
            Box::new(SegmenterObjective {
                net,
                head: h,
                loss: *loss_cfg,
                items: samples
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let map = if validation { &s.truth } else { &s.label };
                        let label = map.contains(h.class).then_some(map);
                        (input(train_tail, &feats[i], &stems[i]), label)
                    })
                    .collect(),
            }),
        ));
    }
    Ok(Composite { parts })
}

/// Gram–Schmidt basis of the stored directions (two passes for accuracy).
/// Directions already in the span are dropped.
pub fn orthonormal_basis(dirs: &[Vec<f64>], dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for d in dirs {
        if d.len() != dim {
            return Err(Error::Layout(format!("direction of length {} in dimension {dim}", d.len())));
        }
        let norm0 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = d.clone();
        for _ in 0..2 {
            for q in &basis {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-10 * norm0 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    if !basis.is_empty() && basis.len() >= dim {
        return Err(Error::NoFeasibleDirection {
            rank: basis.len(),
            dim,
        });
    }
    Ok(basis)
}

/// Remove the components of `delta` along an orthonormal basis.
pub fn project_out(delta: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for q in basis {
            let dot: f64 = delta.iter().zip(q).map(|(a, b)| a * b).sum();
            delta.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
    }
}

/// Largest |<delta, d>| over `dirs`.
pub fn max_abs_inner(delta: &[f64], dirs: &[Vec<f64>]) -> f64 {
    dirs.iter()
        .map(|d| d.iter().zip(delta).map(|(a, b)| a * b).sum::<f64>().abs())
        .fold(0.0, f64::max)
}

/// Model-output gradients kept from earlier tasks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DirectionStore {
    dirs: Vec<Vec<f64>>,
}

impl DirectionStore {
    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    /// Zero-padded to `len`; coordinates created later cannot affect the
    /// outputs these gradients were taken of.
    pub fn padded(&self, len: usize) -> Vec<Vec<f64>> {
        self.dirs
            .iter()
            .map(|d| {
                let mut v = d.clone();
                v.resize(len, 0.0);
                v
            })
            .collect()
    }

    pub fn push(&mut self, dir: Vec<f64>) {
        self.dirs.push(dir);
    }
}

pub const DIRECTIONS_PER_TASK: usize = 10;

/// Gradients of the spatially averaged logit of a task's classes at
/// validation images, one per image, cycling through the classes.
pub fn sample_directions(model: &MonolithicModel, stream: &TaskStream, bank: &FeatureBank, t: usize) -> Result<Vec<Vec<f64>>> {
    let task = stream.task(t);
    let order = model.channel_classes();
    let params = model.store.params();
    (0..DIRECTIONS_PER_TASK.min(task.val.len()))
        .map(|k| {
            let class = task.classes[k % task.classes.len()];
            let ch = order.iter().position(|&c| c == class).ok_or(Error::UnknownClass(class))?;
            let mut tape = Tape::new();
            let f = tape.input(bank.val[t - 1][k].clone());
            let z = model.logits_on_tape(&mut tape, params, f)?;
            let zc = tape.channel(z, ch)?;
            let m = tape.mean(zc)?;
            Ok(tape.backward(m, None)?.param_vector(params.len()))
        })
        .collect()
}

/// Fine-tune the monolithic head on task `t` with background-shifted labels.
/// With `project` set, every update is first projected orthogonally to the
/// stored directions. In both cases the largest |<update, direction>| is
/// folded into `record.max_direction_product`, and after the task new
/// directions are sampled at the task's optimum.
pub fn train_task_baseline(
    model: &mut MonolithicModel,
    stream: &TaskStream,
    bank: &FeatureBank,
    t: usize,
    sched: &Schedule,
    dirs: &mut DirectionStore,
    project: bool,
    record: &mut RunRecord,
) -> Result<()> {
    sched.validate()?;
    let task = stream.task(t);
    model.add_classes(t, &task.classes)?;
    let len = model.store.len();
    let stored = dirs.padded(len);
    let basis = if project { orthonormal_basis(&stored, len)? } else { Vec::new() };
    let mut params = model.store.params().to_vec();
    let trainable: Vec<bool> = model.store.frozen_mask().iter().map(|f| !f).collect();
    let obj = BaselineObjective {
        model: &*model,
        items: task
            .train
            .iter()
            .zip(&bank.train[t - 1])
            .map(|(s, f)| (f, &s.label))
            .collect(),
    };
    let mut max_product: f64 = 0.0;
    let mut hook = |delta: &mut [f64]| {
        if project {
            project_out(delta, &basis);
        }
        max_product = max_product.max(max_abs_inner(delta, &stored));
    };
    let phase = if project { "ogm" } else { "naive" };
    let records = run_epochs(
        &obj,
        &mut params,
        &trainable,
        sched,
        0..sched.epochs,
        &[sched.seed, t as u64, u64::MAX],
        t,
        phase,
        &mut hook,
    )?;
    let (_, grad) = mean_loss_grad(&obj, &params)?;
    drop(obj);
    record.epochs.extend(records);
    record.max_direction_product = record.max_direction_product.max(max_product);
    let g = inf_norm(&grad);
    record.tasks.push(TaskWitness {
        task: t,
        grad_norm: g,
        tolerance: sched.conv_tol,
        converged: g <= sched.conv_tol,
        polish_steps: 0,
    });
    model.store.commit(&params)?;
    model.store.record_snapshot(t)?;
    for d in sample_directions(model, stream, bank, t)? {
        dirs.push(d);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_kills_stored_direction() {
        let basis = orthonormal_basis(&[vec![1.0, 0.0, 0.0]], 3).unwrap();
        let mut d = vec![1.0, 0.0, 0.0];
        project_out(&mut d, &basis);
        assert_eq!(d, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_store_is_identity() {
        let basis = orthonormal_basis(&[], 3).unwrap();
        let mut d = vec![0.3, -0.2, 0.1];
        project_out(&mut d, &basis);
        assert_eq!(d, vec![0.3, -0.2, 0.1]);
    }

    #[test]
    fn full_rank_store_is_infeasible() {
        let dirs = vec![vec![1.0, 0.0], vec![1.0, 1.0]];
        assert!(matches!(
            orthonormal_basis(&dirs, 2),
            Err(Error::NoFeasibleDirection { rank: 2, dim: 2 })
        ));
    }

    #[test]
    fn dependent_directions_are_dropped() {
        let dirs = vec![vec![1.0, 1.0, 0.0], vec![2.0, 2.0, 0.0]];
        assert_eq!(orthonormal_basis(&dirs, 3).unwrap().len(), 1);
    }

    #[test]
    fn polish_reaches_quadratic_minimum() {
        let lg = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok((p[0] * p[0] + 3.0 * p[1] * p[1], vec![2.0 * p[0], 6.0 * p[1]]))
        };
        let lo = |p: &[f64]| -> Result<f64> { Ok(p[0] * p[0] + 3.0 * p[1] * p[1]) };
        let mut p = vec![1.0, -2.0];
        let (g, steps) = polish(&lg, &lo, &mut p, &[true, true], 1e-9, 500).unwrap();
        assert!(g <= 1e-9, "{g} after {steps}");
        let mut q = vec![1.0, -2.0];
        polish(&lg, &lo, &mut q, &[false, true], 1e-9, 500).unwrap();
        assert_eq!(q[0], 1.0);
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::default().validate().is_ok());
        let bad = Schedule {
            router_only_epochs: 5,
            epochs: 3,
            ..Schedule::default()
        };
        assert!(bad.validate().is_err());
    }
}
