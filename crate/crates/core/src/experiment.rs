//! Experiment configuration, orchestration and the artifact directory.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluate::{self, EvalSet, ModeKind};
use crate::forgetting::{self, ForgettingReport, Hessian, ReportRow, HESSIAN_LIMIT};
use crate::formats::{self, Checkpoint};
use crate::inference::{Selection, Strategy};
use crate::losses::LossConfig;
use crate::metrics::{metrics_csv, IouTable, MetricsTable, Phase1Metrics, TaskCurve};
use crate::model::{Arch, CascadeModel, MonolithicModel, TAIL};
use crate::pretrain::{pretrain_backbone, PretrainConfig};
use crate::store::Owner;
use crate::synth::{generate_benchmark, BenchmarkSpec, TaskStream};
use crate::trainer::{
    task_objective, train_joint, train_task_baseline, train_task_spi, DirectionStore, FeatureBank, OptimizerChoice,
    RunRecord, Schedule, SpiOptions,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Cascade with strict parameter isolation.
    Spi,
    /// Cascade with the backbone tail left trainable.
    SharedTail,
    /// Cascade trained once on the whole stream.
    Joint,
    /// Monolithic softmax head, plain fine-tuning.
    Naive,
    /// Monolithic head with orthogonally projected updates.
    Ogm,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Spi, Method::SharedTail, Method::Joint, Method::Naive, Method::Ogm];

    pub fn name(self) -> &'static str {
        match self {
            Method::Spi => "cogcas-spi",
            Method::SharedTail => "cogcas-shared-tail",
            Method::Joint => "joint",
            Method::Naive => "naive",
            Method::Ogm => "ogm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }

    pub fn is_cascade(self) -> bool {
        matches!(self, Method::Spi | Method::SharedTail | Method::Joint)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisConfig {
    /// Measure Hessians of every task's validation loss at its snapshot.
    pub hessian: bool,
    pub hessian_step: f64,
    /// Probe distances for the Taylor residual; empty skips the probe.
    pub taylor_deltas: Vec<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            hessian: false,
            hessian_step: 1e-4,
            taylor_deltas: vec![1e-3, 3e-3, 1e-2],
        }
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Drives the benchmark, initialization, shuffling and fusion.
    pub seed: u64,
    pub method: Method,
    pub benchmark: BenchmarkSpec,
    pub arch: Arch,
    pub pretrain: PretrainConfig,
    pub schedule: Schedule,
    pub loss: LossConfig,
    /// Router threshold.
    pub alpha: f64,
    /// Headline (mode, strategy) for the summary line.
    pub strategy: Strategy,
    pub mode: ModeKind,
    pub include_background: bool,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: Method::Spi,
            benchmark: BenchmarkSpec::default(),
            arch: Arch::default(),
            pretrain: PretrainConfig::default(),
            schedule: Schedule::default(),
            loss: LossConfig::default(),
            alpha: 0.5,
            strategy: Strategy::Logits,
            mode: ModeKind::Full,
            include_background: true,
            analysis: AnalysisConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_mode(v: &str) -> Result<ModeKind> {
    ModeKind::ALL
        .into_iter()
        .find(|m| m.name() == v)
        .ok_or_else(|| Error::Config(format!("unknown mode {v:?}")))
}

impl ExperimentConfig {
    /// Every key with its current value, in canonical order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let b = &self.benchmark;
        let s = &self.schedule;
        let l = &self.loss;
        let deltas: Vec<String> = self.analysis.taylor_deltas.iter().map(|d| d.to_string()).collect();
        vec![
            ("seed", self.seed.to_string()),
            ("method", self.method.name().into()),
            ("benchmark.height", b.height.to_string()),
            ("benchmark.width", b.width.to_string()),
            ("benchmark.num_classes", b.num_classes.to_string()),
            ("benchmark.first_task", b.first_task.to_string()),
            ("benchmark.task_step", b.task_step.to_string()),
            ("benchmark.images_per_task", b.images_per_task.to_string()),
            ("benchmark.train_fraction", b.train_fraction.to_string()),
            ("benchmark.max_shapes", b.max_shapes.to_string()),
            ("benchmark.distractor_prob", b.distractor_prob.to_string()),
            ("benchmark.force_overlap", b.force_overlap.to_string()),
            ("arch.stem_channels", self.arch.stem_channels.to_string()),
            ("arch.feature_channels", self.arch.feature_channels.to_string()),
            ("arch.hidden", self.arch.hidden.to_string()),
            ("arch.baseline_hidden", self.arch.baseline_hidden.to_string()),
            ("pretrain.images", self.pretrain.images.to_string()),
            ("pretrain.epochs", self.pretrain.epochs.to_string()),
            ("pretrain.lr", self.pretrain.lr.to_string()),
            ("pretrain.batch_size", self.pretrain.batch_size.to_string()),
            ("pretrain.classes", self.pretrain.classes.to_string()),
            ("pretrain.pixel_weight", self.pretrain.pixel_weight.to_string()),
            ("schedule.epochs", s.epochs.to_string()),
            ("schedule.router_only_epochs", s.router_only_epochs.to_string()),
            ("schedule.batch_size", s.batch_size.to_string()),
            ("schedule.lr", s.lr.to_string()),
            (
                "schedule.optimizer",
                match s.optimizer {
                    OptimizerChoice::SgdMomentum => "sgd".into(),
                    OptimizerChoice::Adam => "adam".into(),
                },
            ),
            ("schedule.momentum", s.momentum.to_string()),
            ("schedule.weight_decay", s.weight_decay.to_string()),
            ("schedule.cosine", s.cosine.to_string()),
            ("schedule.conv_tol", s.conv_tol.to_string()),
            ("schedule.polish_steps", s.polish_steps.to_string()),
            ("schedule.near_ood_ratio", s.near_ood_ratio.to_string()),
            ("schedule.clip_norm", s.clip_norm.to_string()),
            ("schedule.parallel", s.parallel.to_string()),
            ("loss.focal_alpha", l.focal_alpha.to_string()),
            ("loss.focal_gamma", l.focal_gamma.to_string()),
            ("loss.seg_focal", l.seg_focal.to_string()),
            ("loss.seg_dice", l.seg_dice.to_string()),
            ("loss.lambda", l.lambda.to_string()),
            ("loss.dice_eps", l.dice_eps.to_string()),
            ("eval.alpha", self.alpha.to_string()),
            ("eval.strategy", self.strategy.name().into()),
            ("eval.mode", self.mode.name().into()),
            ("eval.include_background", self.include_background.to_string()),
            ("analysis.hessian", self.analysis.hessian.to_string()),
            ("analysis.hessian_step", self.analysis.hessian_step.to_string()),
            ("analysis.taylor_deltas", deltas.join(",")),
        ]
    }

    /// Set one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let b = &mut self.benchmark;
        let s = &mut self.schedule;
        let l = &mut self.loss;
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "method" => self.method = Method::parse(v)?,
            "benchmark.height" => b.height = parse_num(key, v)?,
            "benchmark.width" => b.width = parse_num(key, v)?,
            "benchmark.num_classes" => b.num_classes = parse_num(key, v)?,
            "benchmark.first_task" => b.first_task = parse_num(key, v)?,
            "benchmark.task_step" => b.task_step = parse_num(key, v)?,
            "benchmark.images_per_task" => b.images_per_task = parse_num(key, v)?,
            "benchmark.train_fraction" => b.train_fraction = parse_num(key, v)?,
            "benchmark.max_shapes" => b.max_shapes = parse_num(key, v)?,
            "benchmark.distractor_prob" => b.distractor_prob = parse_num(key, v)?,
            "benchmark.force_overlap" => b.force_overlap = parse_bool(key, v)?,
            "arch.stem_channels" => self.arch.stem_channels = parse_num(key, v)?,
            "arch.feature_channels" => self.arch.feature_channels = parse_num(key, v)?,
            "arch.hidden" => self.arch.hidden = parse_num(key, v)?,
            "arch.baseline_hidden" => self.arch.baseline_hidden = parse_num(key, v)?,
            "pretrain.images" => self.pretrain.images = parse_num(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = parse_num(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse_num(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse_num(key, v)?,
            "pretrain.classes" => self.pretrain.classes = parse_num(key, v)?,
            "pretrain.pixel_weight" => self.pretrain.pixel_weight = parse_num(key, v)?,
            "schedule.epochs" => s.epochs = parse_num(key, v)?,
            "schedule.router_only_epochs" => s.router_only_epochs = parse_num(key, v)?,
            "schedule.batch_size" => s.batch_size = parse_num(key, v)?,
            "schedule.lr" => s.lr = parse_num(key, v)?,
            "schedule.optimizer" => {
                s.optimizer = match v {
                    "sgd" => OptimizerChoice::SgdMomentum,
                    "adam" => OptimizerChoice::Adam,
                    _ => return Err(Error::Config(format!("unknown optimizer {v:?}"))),
                }
            }
            "schedule.momentum" => s.momentum = parse_num(key, v)?,
            "schedule.weight_decay" => s.weight_decay = parse_num(key, v)?,
            "schedule.cosine" => s.cosine = parse_bool(key, v)?,
            "schedule.conv_tol" => s.conv_tol = parse_num(key, v)?,
            "schedule.polish_steps" => s.polish_steps = parse_num(key, v)?,
            "schedule.near_ood_ratio" => s.near_ood_ratio = parse_num(key, v)?,
            "schedule.clip_norm" => s.clip_norm = parse_num(key, v)?,
            "schedule.parallel" => s.parallel = parse_bool(key, v)?,
            "loss.focal_alpha" => l.focal_alpha = parse_num(key, v)?,
            "loss.focal_gamma" => l.focal_gamma = parse_num(key, v)?,
            "loss.seg_focal" => l.seg_focal = parse_num(key, v)?,
            "loss.seg_dice" => l.seg_dice = parse_num(key, v)?,
            "loss.lambda" => l.lambda = parse_num(key, v)?,
            "loss.dice_eps" => l.dice_eps = parse_num(key, v)?,
            "eval.alpha" => self.alpha = parse_num(key, v)?,
            "eval.strategy" => self.strategy = Strategy::parse(v)?,
            "eval.mode" => self.mode = parse_mode(v)?,
            "eval.include_background" => self.include_background = parse_bool(key, v)?,
            "analysis.hessian" => self.analysis.hessian = parse_bool(key, v)?,
            "analysis.hessian_step" => self.analysis.hessian_step = parse_num(key, v)?,
            "analysis.taylor_deltas" => {
                self.analysis.taylor_deltas = v
                    .split(',')
                    .map(str::trim)
                    .filter(|x| !x.is_empty())
                    .map(|x| parse_num(key, x))
                    .collect::<Result<_>>()?
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// `key = value` lines; `#` starts a comment. Keys not given keep
    /// their defaults. A `checksum` line, if present, must match.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut claimed = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "checksum" {
                claimed = Some(v.to_string());
            } else {
                cfg.set(k, v)?;
            }
        }
        if let Some(c) = claimed {
            if c != cfg.checksum() {
                return Err(Error::Config("checksum does not match the configuration".into()));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text without the checksum line.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hex SHA-256 of the canonical text.
    pub fn checksum(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }

    /// Canonical text followed by its checksum.
    pub fn to_text(&self) -> String {
        format!("{}checksum = {}\n", self.canonical(), self.checksum())
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        self.schedule.validate()?;
        self.loss.validate()?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Threshold(self.alpha));
        }
        if self.arch.hidden == 0 || self.arch.feature_channels == 0 || self.arch.stem_channels == 0 {
            return Err(Error::Config("architecture widths must be positive".into()));
        }
        if self.pretrain.batch_size == 0 || !(self.pretrain.lr > 0.0) {
            return Err(Error::Config("pretraining batch size and learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Schedule with its seed tied to the run seed.
    pub fn resolved_schedule(&self) -> Schedule {
        Schedule {
            seed: self.seed,
            ..self.schedule.clone()
        }
    }

    pub fn resolved_benchmark(&self) -> BenchmarkSpec {
        BenchmarkSpec {
            seed: self.seed,
            ..self.benchmark.clone()
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Pretrained, frozen feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub stem: Vec<f64>,
    pub tail: Vec<f64>,
    pub loss: f64,
}

pub fn pretrain(cfg: &ExperimentConfig) -> Result<Backbone> {
    let (stem, tail, loss) = pretrain_backbone(&cfg.arch, &cfg.resolved_benchmark(), &cfg.pretrain, cfg.seed)?;
    Ok(Backbone { stem, tail, loss })
}

/// Per-task forgetting diagnostics of a cascade run.
#[derive(Clone, Debug, Default)]
pub struct ForgettingAnalysis {
    pub report: ForgettingReport,
    /// Parameter indices the Hessians cover.
    pub indices: Vec<usize>,
    /// `H_τ` at `θ_τ*` for `τ < T`, when requested.
    pub hessians: Vec<Hessian>,
    /// `Δ_tᵀ(Σ_{τ<t} H_τ)Δ_t` for `t = 2..=T`.
    pub quad_terms: Vec<f64>,
}

impl ForgettingAnalysis {
    pub fn max_forgetting(&self) -> f64 {
        self.report.rows.iter().map(|r| r.forgetting_rate.abs()).fold(0.0, f64::max)
    }

    pub fn max_off_block(&self) -> f64 {
        self.report.rows.iter().map(|r| r.off_block_max).filter(|v| !v.is_nan()).fold(0.0, f64::max)
    }
}

/// Options for [`analyze_forgetting`].
#[derive(Clone, Debug)]
pub struct AnalysisOptions {
    pub hessian: bool,
    pub step: f64,
    pub taylor_deltas: Vec<f64>,
    /// Evaluate losses through the tail layer so a moving tail counts.
    pub train_tail: bool,
    /// Hessian coordinates: every head block, plus the tail biases when
    /// the tail was trained. `None` uses that default.
    pub indices: Option<Vec<usize>>,
    /// Only measure Hessians for `τ ≤ hessian_tasks`.
    pub hessian_tasks: Option<usize>,
}

impl AnalysisOptions {
    pub fn from_config(cfg: &AnalysisConfig, train_tail: bool) -> Self {
        Self {
            hessian: cfg.hessian,
            step: cfg.hessian_step,
            taylor_deltas: cfg.taylor_deltas.clone(),
            train_tail,
            indices: None,
            hessian_tasks: None,
        }
    }
}

/// Head-block coordinates, then the tail biases if `with_tail_bias`.
pub fn head_indices(model: &CascadeModel, with_tail_bias: bool) -> Result<Vec<usize>> {
    let mut idx: Vec<usize> = model
        .store
        .blocks()
        .iter()
        .filter(|b| matches!(b.owner, Owner::Task(_)))
        .flat_map(|b| b.range())
        .collect();
    if with_tail_bias {
        let tail = model.store.block(TAIL)?.range();
        let biases = model.arch.feature_channels;
        idx.extend(tail.end - biases..tail.end);
    }
    Ok(idx)
}

/// Coordinates of task `tau` where the loss is smooth: every router block
/// and each segmenter's final projection.
pub fn smooth_coordinates(model: &CascadeModel, tau: usize) -> Vec<usize> {
    let arch = model.arch;
    let proj = 2 * 3 * arch.hidden + 2;
    let mut idx = Vec::new();
    for h in model.heads().iter().filter(|h| h.task == tau) {
        idx.extend(h.router..h.router + arch.router_len());
        let end = h.segmenter + arch.segmenter_len();
        idx.extend(end - proj..end);
    }
    idx
}

/// Forgetting rates between every pair of snapshots, and optionally the
/// Hessian terms, Taylor exponents, curvature and block structure.
pub fn analyze_forgetting(
    model: &CascadeModel,
    stream: &TaskStream,
    bank: &FeatureBank,
    loss_cfg: &LossConfig,
    opts: &AnalysisOptions,
) -> Result<ForgettingAnalysis> {
    let tasks = model.store.snapshots().len();
    let snaps: Vec<Vec<f64>> = (1..=tasks).map(|t| model.store.snapshot_padded(t)).collect::<Result<_>>()?;
    let objectives = (1..=tasks)
        .map(|t| task_objective(model, stream, bank, t, true, loss_cfg, opts.train_tail))
        .collect::<Result<Vec<_>>>()?;
    let base: Vec<f64> = objectives
        .iter()
        .zip(&snaps)
        .map(|(o, s)| o.loss(s))
        .collect::<Result<_>>()?;

    let mut analysis = ForgettingAnalysis::default();
    let hessian_tasks = opts.hessian_tasks.unwrap_or(tasks.saturating_sub(1)).min(tasks);
    if opts.hessian {
        analysis.indices = match &opts.indices {
            Some(i) => i.clone(),
            None => head_indices(model, opts.train_tail)?,
        };
        for tau in 1..=hessian_tasks {
            let obj = &objectives[tau - 1];
            let grad = |p: &[f64]| -> Result<Vec<f64>> { Ok(obj.loss_grad(p)?.1) };
            analysis
                .hessians
                .push(forgetting::hessian(&grad, &snaps[tau - 1], &analysis.indices, opts.step, HESSIAN_LIMIT)?);
        }
    }

    let mut per_task = Vec::with_capacity(tasks);
    for tau in 1..=tasks {
        let own = model.store.ranges_of(Owner::Task(tau));
        let (min_eig, off_block) = match analysis.hessians.get(tau - 1) {
            Some(h) => {
                let local: Vec<usize> = (0..h.dim()).filter(|&k| own.iter().any(|r| r.contains(&h.indices[k]))).collect();
                let sub = Hessian {
                    indices: local.iter().map(|&k| h.indices[k]).collect(),
                    matrix: h.matrix.select_rows(&local).select_columns(&local),
                    step: h.step,
                    asymmetry: h.asymmetry,
                };
                (sub.min_eigenvalue(), h.off_block_max(&own))
            }
            None => (f64::NAN, f64::NAN),
        };
        let exponent = if opts.taylor_deltas.is_empty() {
            f64::NAN
        } else {
            let obj = &objectives[tau - 1];
            let loss = |p: &[f64]| obj.loss(p);
            let grad = |p: &[f64]| -> Result<Vec<f64>> { Ok(obj.loss_grad(p)?.1) };
            let theta = &snaps[tau - 1];
            let g = grad(theta)?;
            let u = forgetting::probe_direction(theta.len(), &smooth_coordinates(model, tau), &g, model.seed ^ tau as u64)?;
            forgetting::taylor_residual(&loss, &grad, theta, &u, &opts.taylor_deltas, opts.step)?.exponent
        };
        per_task.push((min_eig, off_block, exponent));
    }

    for t in 2..=tasks {
        let rates: Vec<f64> = (1..t)
            .map(|tau| Ok(objectives[tau - 1].loss(&snaps[t - 1])? - base[tau - 1]))
            .collect::<Result<_>>()?;
        let avg = forgetting::average_forgetting(&rates, t)?;
        let (quad, vd) = if opts.hessian && t - 1 <= analysis.hessians.len() {
            let delta: Vec<f64> = snaps[t - 1].iter().zip(&snaps[t - 2]).map(|(a, b)| a - b).collect();
            let hs: Vec<&Hessian> = analysis.hessians[..t - 1].iter().collect();
            let quad = forgetting::quadratic_term(&delta, &hs)?;
            let prior: Vec<&[f64]> = snaps[..t - 1].iter().map(Vec::as_slice).collect();
            let v = forgetting::v_vector(&hs, &snaps[t - 2], &prior)?;
            let d = hs[0].restrict(&delta);
            analysis.quad_terms.push(quad);
            (quad, v.dot(&d))
        } else {
            (f64::NAN, f64::NAN)
        };
        for (tau, &rate) in (1..t).zip(&rates) {
            let (min_eig, off_block_max, taylor_exponent) = per_task[tau - 1];
            analysis.report.rows.push(ReportRow {
                tau,
                t,
                forgetting_rate: rate,
                avg_forgetting: avg,
                quad_term: quad,
                v_dot_delta: vd,
                taylor_exponent,
                min_eig,
                off_block_max,
            });
        }
    }
    Ok(analysis)
}

/// What a run produced, in memory.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub config: ExperimentConfig,
    /// `(mode, strategy, table)`; baselines use mode `-` and strategy `argmax`.
    pub metrics: Vec<(String, String, MetricsTable)>,
    pub curve: TaskCurve,
    pub phase1: Option<Phase1Metrics>,
    pub record: RunRecord,
    pub checkpoint: Checkpoint,
    pub forgetting: Option<ForgettingAnalysis>,
    /// Artifact file names and contents, in write order.
    pub files: Vec<(String, Vec<u8>)>,
}

impl Outcome {
    /// `all` mIoU of the given (mode, strategy) row, as a fraction.
    pub fn all(&self, mode: &str, strategy: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|(m, s, _)| m == mode && s == strategy)
            .and_then(|(_, _, t)| t.all)
    }
}

/// Pretrain the backbone, then [`run_with_backbone`].
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Outcome> {
    cfg.validate()?;
    let backbone = pretrain(cfg)?;
    run_with_backbone(cfg, &backbone, out)
}

/// Train, evaluate and, when `out` is given, write the artifact directory.
/// A failing stage leaves a `FAILED` file next to whatever was written.
pub fn run_with_backbone(cfg: &ExperimentConfig, backbone: &Backbone, out: Option<&Path>) -> Result<Outcome> {
    let result = run_inner(cfg, backbone);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        match &result {
            Ok(outcome) => {
                let _ = std::fs::remove_file(dir.join("FAILED"));
                for (name, bytes) in &outcome.files {
                    formats::write_file(&dir.join(name), bytes)?;
                }
            }
            Err(e) => {
                formats::write_file(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
                formats::write_file(&dir.join("FAILED"), format!("{e}\n").as_bytes())?;
            }
        }
    }
    result
}

fn class_groups(stream: &TaskStream) -> (Vec<u16>, Vec<u16>) {
    let all = stream.classes_up_to(stream.num_tasks());
    let old = stream.task(1).classes.clone();
    let new = all.into_iter().filter(|c| !old.contains(c)).collect();
    (old, new)
}

fn run_inner(cfg: &ExperimentConfig, backbone: &Backbone) -> Result<Outcome> {
    cfg.validate()?;
    let stream = generate_benchmark(&cfg.resolved_benchmark())?;
    let sched = cfg.resolved_schedule();
    let mut model = CascadeModel::new(cfg.arch, backbone.stem.clone(), backbone.tail.clone(), cfg.seed)?;
    let mut bank = FeatureBank::build(&model, &stream)?;
    let (old, new) = class_groups(&stream);
    let mut record = RunRecord::default();
    let selection = Selection::Threshold(cfg.alpha);
    let task_classes: Vec<Vec<u16>> = stream.tasks.iter().map(|t| t.classes.clone()).collect();

    let mut metrics = Vec::new();
    let mut phase1 = None;
    let mut forgetting_analysis = None;
    let curve;
    let checkpoint;
    match cfg.method {
        Method::Spi | Method::SharedTail => {
            let train_tail = cfg.method == Method::SharedTail;
            let mut tables = Vec::with_capacity(stream.num_tasks());
            for t in 1..=stream.num_tasks() {
                train_task_spi(&mut model, &stream, &bank, t, &sched, &cfg.loss, SpiOptions { train_tail }, &mut record)?;
                if train_tail {
                    let tail = model.tail().to_vec();
                    bank.refresh(&model, &tail);
                }
                let set = EvalSet::new(stream.all_val(), bank.all_val());
                tables.push(evaluate::head_table(&model, &set, selection)?);
            }
            curve = TaskCurve::from_tables(&tables, &task_classes)?;
            let opts = AnalysisOptions::from_config(&cfg.analysis, train_tail);
            forgetting_analysis = Some(analyze_forgetting(&model, &stream, &bank, &cfg.loss, &opts)?);
        }
        Method::Joint => {
            train_joint(&mut model, &stream, &bank, &sched, &cfg.loss, &mut record)?;
            curve = TaskCurve::default();
        }
        Method::Naive | Method::Ogm => {
            let mut base = MonolithicModel::new(cfg.arch, cfg.seed)?;
            let mut dirs = DirectionStore::default();
            let mut tables = Vec::with_capacity(stream.num_tasks());
            let set = EvalSet::new(stream.all_val(), bank.all_val());
            for t in 1..=stream.num_tasks() {
                train_task_baseline(&mut base, &stream, &bank, t, &sched, &mut dirs, cfg.method == Method::Ogm, &mut record)?;
                tables.push(evaluate::baseline_table(&base, &set)?);
            }
            curve = TaskCurve::from_tables(&tables, &task_classes)?;
            let table = evaluate::baseline_miou_table(&base, &set)?;
            metrics.push(("-".to_string(), "argmax".to_string(), MetricsTable::build(table, &old, &new, cfg.include_background)));
            checkpoint = Checkpoint::Monolithic(base);
            return finish(cfg, &stream, metrics, curve, phase1, record, checkpoint, forgetting_analysis);
        }
    }
    let set = EvalSet::new(stream.all_val(), bank.all_val());
    for (mode, strategy, table) in evaluate::evaluate_cascade(&model, &set, selection, &ModeKind::ALL, &Strategy::ALL, cfg.seed)? {
        metrics.push((
            mode.name().to_string(),
            strategy.name().to_string(),
            MetricsTable::build(table, &old, &new, cfg.include_background),
        ));
    }
    phase1 = Some(evaluate::phase1(&model, &set, cfg.alpha)?);
    checkpoint = Checkpoint::Cascade(model);
    finish(cfg, &stream, metrics, curve, phase1, record, checkpoint, forgetting_analysis)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    cfg: &ExperimentConfig,
    stream: &TaskStream,
    metrics: Vec<(String, String, MetricsTable)>,
    curve: TaskCurve,
    phase1: Option<Phase1Metrics>,
    record: RunRecord,
    checkpoint: Checkpoint,
    forgetting: Option<ForgettingAnalysis>,
) -> Result<Outcome> {
    let stamp = format!("# config {}\n", cfg.checksum());
    let classes = stream.classes_up_to(stream.num_tasks());
    let rows: Vec<(String, String, String, MetricsTable)> = metrics
        .iter()
        .map(|(m, s, t)| (cfg.method.name().to_string(), m.clone(), s.clone(), t.clone()))
        .collect();
    let mut files: Vec<(String, Vec<u8>)> = vec![
        ("config.txt".into(), cfg.to_text().into_bytes()),
        ("benchmark.txt".into(), stream.describe().into_bytes()),
        ("metrics.csv".into(), format!("{stamp}{}", metrics_csv(&rows, &classes)).into_bytes()),
        (
            "curve.csv".into(),
            format!("{stamp}x,y,series\n{}", curve.to_series(cfg.method.name())).into_bytes(),
        ),
        ("training.log".into(), format!("{stamp}{}", record.to_text()).into_bytes()),
        ("checkpoint.bin".into(), formats::encode_checkpoint(&checkpoint)),
    ];
    if let Some(p) = &phase1 {
        files.push(("phase1.csv".into(), format!("{stamp}{}", phase1_csv(p)).into_bytes()));
    }
    if let Some(f) = &forgetting {
        files.push(("forgetting.csv".into(), format!("{stamp}{}", f.report.to_csv()).into_bytes()));
    }
    let headline = metrics
        .iter()
        .find(|(m, s, _)| (m == cfg.mode.name() && s == cfg.strategy.name()) || m == "-")
        .and_then(|(_, _, t)| t.all);
    let mut summary = format!("{stamp}method = {}\n", cfg.method.name());
    let _ = writeln!(summary, "headline = {} {}", cfg.mode.name(), cfg.strategy.name());
    let _ = writeln!(summary, "all_miou = {}", headline.map_or("nan".into(), |v| format!("{:.6}", 100.0 * v)));
    let _ = writeln!(summary, "curve_rows_constant = {}", curve.rows_constant());
    files.push(("summary.txt".into(), summary.into_bytes()));
    let mut manifest = stamp.clone();
    for (name, bytes) in &files {
        let _ = writeln!(manifest, "{} {name}", hex(&Sha256::digest(bytes)));
    }
    files.push(("manifest.txt".into(), manifest.into_bytes()));
    Ok(Outcome {
        config: cfg.clone(),
        metrics,
        curve,
        phase1,
        record,
        checkpoint,
        forgetting,
        files,
    })
}

/// `class,ap` per class, then `map`, `precision` and `recall` rows.
pub fn phase1_csv(p: &Phase1Metrics) -> String {
    let mut out = String::from("key,value\n");
    for (c, ap) in &p.per_class_ap {
        let _ = writeln!(out, "ap_c{c},{ap:.6}");
    }
    let _ = writeln!(out, "map,{:.6}", p.map);
    let _ = writeln!(out, "precision,{:.6}", p.precision);
    let _ = writeln!(out, "recall,{:.6}", p.recall);
    out
}

/// IoU table of one checkpoint under one mode and strategy, for `eval`.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    checkpoint: &Checkpoint,
    mode: ModeKind,
    strategy: Strategy,
) -> Result<MetricsTable> {
    let stream = generate_benchmark(&cfg.resolved_benchmark())?;
    let (old, new) = class_groups(&stream);
    let table: IouTable = match checkpoint {
        Checkpoint::Cascade(model) => {
            let bank = FeatureBank::build(model, &stream)?;
            let set = EvalSet::new(stream.all_val(), bank.all_val());
            evaluate::evaluate_cascade(model, &set, Selection::Threshold(cfg.alpha), &[mode], &[strategy], cfg.seed)?
                .pop()
                .map(|(_, _, t)| t)
                .ok_or_else(|| Error::Precondition("no evaluation produced".into()))?
        }
        Checkpoint::Monolithic(base) => {
            let backbone = pretrain(cfg)?;
            let feat = CascadeModel::new(cfg.arch, backbone.stem, backbone.tail, cfg.seed)?;
            let bank = FeatureBank::build(&feat, &stream)?;
            let set = EvalSet::new(stream.all_val(), bank.all_val());
            evaluate::baseline_miou_table(base, &set)?
        }
    };
    Ok(MetricsTable::build(table, &old, &new, cfg.include_background))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 17;
        cfg.method = Method::Ogm;
        cfg.schedule.lr = 0.123456789;
        cfg.analysis.taylor_deltas = vec![1e-3, 5e-2];
        let text = cfg.to_text();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.checksum(), cfg.checksum());
    }

    #[test]
    fn config_errors() {
        assert!(ExperimentConfig::parse("bogus = 1").is_err());
        assert!(ExperimentConfig::parse("seed = x").is_err());
        assert!(ExperimentConfig::parse("seed 3").is_err());
        assert!(ExperimentConfig::parse("eval.alpha = 1.5").is_err());
        let tampered = ExperimentConfig::default().to_text().replace("seed = 0", "seed = 1");
        assert!(ExperimentConfig::parse(&tampered).is_err());
        let partial = ExperimentConfig::parse("# comment\nseed = 4\nmethod = naive\n").unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.method, Method::Naive);
    }
}
