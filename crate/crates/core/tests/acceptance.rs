//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=2,5` runs a subset. Failures are reported, not fatal,
//! unless `ACCEPTANCE_STRICT=1` is set.

mod common;

use std::cell::OnceCell;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use cogcas_core::evaluate::EvalSet;
use cogcas_core::experiment::{self, AnalysisOptions, Backbone, ExperimentConfig, Method, Outcome};
use cogcas_core::formats::Checkpoint;
use cogcas_core::forgetting::quadratic_recurrence;
use cogcas_core::gradcheck;
use cogcas_core::inference::{self, Mode, Selection, Strategy};
use cogcas_core::model::{CascadeModel, TAIL};
use cogcas_core::store::Owner;
use cogcas_core::synth::generate_benchmark;
use cogcas_core::trainer::FeatureBank;
use cogcas_core::Result;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn secs(d: Duration) -> String {
    format!("{:.0} s", d.as_secs_f64())
}

fn pts(v: Option<f64>) -> f64 {
    100.0 * v.unwrap_or(f64::NAN)
}

/// Runs shared between criteria, computed on first use.
struct Runs {
    base: ExperimentConfig,
    backbone: OnceCell<(Backbone, Duration)>,
    spi: OnceCell<(Outcome, Duration)>,
    naive: OnceCell<Outcome>,
}

impl Runs {
    fn new() -> Self {
        Self {
            base: ExperimentConfig::default(),
            backbone: OnceCell::new(),
            spi: OnceCell::new(),
            naive: OnceCell::new(),
        }
    }

    fn with_method(&self, method: Method) -> ExperimentConfig {
        let mut cfg = self.base.clone();
        cfg.method = method;
        cfg
    }

    fn backbone(&self) -> Result<&(Backbone, Duration)> {
        if self.backbone.get().is_none() {
            let t = Instant::now();
            let b = experiment::pretrain(&self.base)?;
            let _ = self.backbone.set((b, t.elapsed()));
        }
        Ok(self.backbone.get().expect("set above"))
    }

    fn run(&self, cfg: &ExperimentConfig) -> Result<Outcome> {
        experiment::run_with_backbone(cfg, &self.backbone()?.0, None)
    }

    /// Cascade run with strict isolation; the duration includes pretraining.
    fn spi(&self) -> Result<&(Outcome, Duration)> {
        if self.spi.get().is_none() {
            let pre = self.backbone()?.1;
            let t = Instant::now();
            let out = self.run(&self.with_method(Method::Spi))?;
            let _ = self.spi.set((out, pre + t.elapsed()));
        }
        Ok(self.spi.get().expect("set above"))
    }

    fn naive(&self) -> Result<&Outcome> {
        if self.naive.get().is_none() {
            let out = self.run(&self.with_method(Method::Naive))?;
            let _ = self.naive.set(out);
        }
        Ok(self.naive.get().expect("set above"))
    }
}

fn cascade(outcome: &Outcome) -> &CascadeModel {
    match &outcome.checkpoint {
        Checkpoint::Cascade(m) => m,
        Checkpoint::Monolithic(_) => panic!("cascade run produced a monolithic checkpoint"),
    }
}

/// Every block that existed at task `tau` holds the same bits at every
/// later snapshot.
fn frozen_blocks_equal(model: &CascadeModel) -> Result<(bool, usize)> {
    let snaps = model.store.snapshots();
    let mut compared = 0;
    for (&tau, early) in snaps {
        for (&t, late) in snaps.range(tau + 1..) {
            for b in model.store.blocks() {
                let r = b.range();
                if r.end > early.len() {
                    continue;
                }
                let same = early[r.clone()].iter().zip(&late[r]).all(|(a, b)| a.to_bits() == b.to_bits());
                if !same {
                    eprintln!("block {} moved between tasks {tau} and {t}", b.name);
                    return Ok((false, compared));
                }
                compared += 1;
            }
        }
    }
    Ok((true, compared))
}

fn c1(runs: &Runs) -> Result<Verdict> {
    let (out, elapsed) = runs.spi()?;
    let rows = &out.forgetting.as_ref().expect("cascade runs report forgetting").report.rows;
    let nonzero = rows.iter().filter(|r| r.forgetting_rate.to_bits() != 0).count();
    let (frozen, compared) = frozen_blocks_equal(cascade(out))?;
    let tasks = cascade(out).store.snapshots().len();
    let pass = nonzero == 0 && rows.len() == tasks * (tasks - 1) / 2 && frozen && elapsed.as_secs() < 600;
    verdict(
        pass,
        format!(
            "{} (tau, t) pairs, {nonzero} with nonzero rate; {compared} frozen block comparisons {}; {}",
            rows.len(),
            if frozen { "bit-equal" } else { "DIFFER" },
            secs(*elapsed)
        ),
    )
}

fn c2(runs: &Runs) -> Result<Verdict> {
    let (out, _) = runs.spi()?;
    let model = cascade(out);
    let cfg = &out.config;
    let stream = generate_benchmark(&cfg.resolved_benchmark())?;
    let bank = FeatureBank::build(model, &stream)?;
    let opts = AnalysisOptions {
        hessian: true,
        step: cfg.analysis.hessian_step,
        taylor_deltas: Vec::new(),
        train_tail: false,
        indices: None,
        hessian_tasks: None,
    };
    let t = Instant::now();
    let a = experiment::analyze_forgetting(model, &stream, &bank, &cfg.loss, &opts)?;
    let elapsed = t.elapsed();
    let max_quad = a.quad_terms.iter().map(|q| q.abs()).fold(0.0, f64::max);
    let off = a.max_off_block();
    let dim = a.indices.len();
    let pass = a.quad_terms.len() + 1 == stream.num_tasks()
        && max_quad < 1e-10
        && off < 1e-8
        && dim <= 2000
        && elapsed.as_secs() < 900;
    verdict(
        pass,
        format!(
            "max quad term {max_quad:e}, max off-block {off:e}, {} Hessians of dim {dim}; {}",
            a.hessians.len(),
            secs(elapsed)
        ),
    )
}

fn c3(runs: &Runs) -> Result<Verdict> {
    let (frozen, _) = runs.spi()?;
    let cfg = runs.with_method(Method::SharedTail);
    let out = runs.run(&cfg)?;
    let model = cascade(&out);
    let max_rate = out
        .forgetting
        .as_ref()
        .expect("cascade runs report forgetting")
        .report
        .rows
        .iter()
        .map(|r| r.forgetting_rate)
        .fold(f64::NEG_INFINITY, f64::max);

    // H_1 over the first task's blocks and the tail biases.
    let stream = generate_benchmark(&cfg.resolved_benchmark())?;
    let bank = FeatureBank::build(model, &stream)?;
    let mut indices: Vec<usize> = model.store.ranges_of(Owner::Task(1)).into_iter().flatten().collect();
    let tail = model.store.block(TAIL)?.range();
    indices.extend(tail.end - model.arch.feature_channels..tail.end);
    let opts = AnalysisOptions {
        hessian: true,
        step: cfg.analysis.hessian_step,
        taylor_deltas: Vec::new(),
        train_tail: true,
        indices: Some(indices),
        hessian_tasks: Some(1),
    };
    let a = experiment::analyze_forgetting(model, &stream, &bank, &cfg.loss, &opts)?;
    let off = a.hessians[0].off_block_max(&model.store.ranges_of(Owner::Task(1)));

    let old_frozen = pts(frozen.metrics_row("full", "logits").old);
    let old_shared = pts(out.metrics_row("full", "logits").old);
    let drop = old_frozen - old_shared;
    verdict(
        max_rate > 0.0 && off > 1e-3 && drop > 10.0,
        format!("max rate {max_rate:e}, off-block {off:e}, old-class mIoU {old_frozen:.2} -> {old_shared:.2} (drop {drop:.2})"),
    )
}

fn c4(runs: &Runs) -> Result<Verdict> {
    let t = Instant::now();
    let mut gap: f64 = 0.0;
    let mut v_gap: f64 = 0.0;
    for seed in 0..20 {
        let (tasks, optima) = common::dense_stream(6, 5, seed);
        for s in quadratic_recurrence(&tasks, &optima)? {
            gap = gap.max((s.measured - s.predicted).abs());
            v_gap = v_gap.max(s.v_step_gap);
        }
    }
    let mut closed: f64 = 0.0;
    for seed in 0..20 {
        let (tasks, optima) = common::late_overlap_stream(seed);
        let steps = quadratic_recurrence(&tasks, &optima)?;
        let last = steps.last().expect("four tasks");
        closed = closed.max((last.measured - last.quad / (2.0 * (last.t - 1) as f64)).abs());
    }

    // Taylor residual scaling of the trained heads at each snapshot.
    let (out, _) = runs.spi()?;
    let model = cascade(out);
    let cfg = &out.config;
    let stream = generate_benchmark(&cfg.resolved_benchmark())?;
    let bank = FeatureBank::build(model, &stream)?;
    let mut opts = AnalysisOptions::from_config(&cfg.analysis, false);
    opts.hessian = false;
    let a = experiment::analyze_forgetting(model, &stream, &bank, &cfg.loss, &opts)?;
    let exponent = a
        .report
        .rows
        .iter()
        .map(|r| r.taylor_exponent)
        .fold(f64::INFINITY, f64::min);
    let elapsed = t.elapsed();
    verdict(
        gap <= 1e-9 && closed <= 1e-9 && v_gap <= 1e-9 && exponent >= 2.5 && elapsed.as_secs() < 300,
        format!(
            "recurrence gap {gap:e}, closed-form gap {closed:e}, v-recursion gap {v_gap:e}, min Taylor exponent {exponent:.3} over deltas {:?}; {}",
            cfg.analysis.taylor_deltas,
            secs(elapsed)
        ),
    )
}

fn c5(_: &Runs) -> Result<Verdict> {
    let t = Instant::now();
    let results = gradcheck::run_suite(100, 0)?;
    let elapsed = t.elapsed();
    let worst = results.iter().max_by(|a, b| a.worst.total_cmp(&b.worst)).expect("cases");
    let failing: Vec<&str> = results.iter().filter(|r| r.worst >= 1e-5).map(|r| r.name).collect();
    verdict(
        failing.is_empty() && elapsed.as_secs() < 120,
        format!(
            "{} cases x 100 instances, worst {:e} ({}), failing {failing:?}; {}",
            results.len(),
            worst.worst,
            worst.name,
            secs(elapsed)
        ),
    )
}

fn c6(runs: &Runs) -> Result<Verdict> {
    let (spi, _) = runs.spi()?;
    let naive = runs.naive()?;
    let spread = spi.curve.max_row_spread();
    let row = &naive.curve.rows[0];
    let drop = 100.0 * (row[0] - row[row.len() - 1]);
    verdict(
        spi.curve.rows_constant() && drop > 20.0,
        format!("cascade max row spread {spread:e}; naive task-1 row {:.2} -> {:.2} (drop {drop:.2})", 100.0 * row[0], 100.0 * row[row.len() - 1]),
    )
}

fn c7(runs: &Runs) -> Result<Verdict> {
    let (out, _) = runs.spi()?;
    let s = out.config.strategy.name();
    let oracle = pts(out.all("oracle", s));
    let full = pts(out.all("full", s));
    let seg = pts(out.all("segmentation-only", s));
    verdict(
        oracle >= full && full >= seg && full - seg >= 20.0,
        format!("{s}: oracle {oracle:.2}, full {full:.2}, segmentation-only {seg:.2} (gap {:.2})", full - seg),
    )
}

fn c8(runs: &Runs) -> Result<Verdict> {
    let mut cfg = runs.with_method(Method::Spi);
    cfg.benchmark.force_overlap = true;
    cfg.analysis.taylor_deltas.clear();
    let out = runs.run(&cfg)?;
    let get = |s: &str| pts(out.all("full", s));
    let (loose, strict) = (get("loose"), get("strict"));
    let singles: Vec<(&str, f64)> = ["logits", "random", "distributed"].iter().map(|&s| (s, get(s))).collect();
    let ordered = singles.iter().all(|&(_, v)| loose >= v && v >= strict);

    // Per image: every pixel the logits choice gets right, loose gets right.
    let model = cascade(&out);
    let stream = generate_benchmark(&cfg.resolved_benchmark())?;
    let bank = FeatureBank::build(model, &stream)?;
    let set = EvalSet::new(stream.all_val(), bank.all_val());
    let mut violations = 0;
    let mut overlaps = 0;
    for (sample, features) in set.samples.iter().zip(&set.features) {
        let pred = inference::run_cascade(model, features, Selection::Threshold(cfg.alpha), &Mode::Full)?;
        let logits = inference::fuse(&pred.masks, Strategy::Logits, 0)?;
        let loose = inference::loose_labels(&pred.masks, &sample.truth)?;
        overlaps += (0..logits.labels.len()).filter(|&p| pred.masks.claimants(p).len() > 1).count();
        violations += logits
            .labels
            .iter()
            .zip(&loose.labels)
            .zip(&sample.truth.labels)
            .filter(|((l, o), t)| l == t && o != t)
            .count();
    }
    let listed: Vec<String> = singles.iter().map(|(s, v)| format!("{s} {v:.2}")).collect();
    verdict(
        ordered && violations == 0,
        format!(
            "loose {loose:.2}, {}, strict {strict:.2}; {overlaps} overlapping pixels, {violations} containment violations over {} images",
            listed.join(", "),
            set.len()
        ),
    )
}

fn c9(runs: &Runs) -> Result<Verdict> {
    let (out, _) = runs.spi()?;
    let p = out.phase1.as_ref().expect("cascade runs report phase I");
    verdict(
        p.map > 0.95 && p.precision > 0.90 && p.recall > 0.90,
        format!("alpha {}: mAP {:.4}, precision {:.4}, recall {:.4}", out.config.alpha, p.map, p.precision, p.recall),
    )
}

fn c10(runs: &Runs) -> Result<Verdict> {
    let ogm = runs.run(&runs.with_method(Method::Ogm))?;
    let naive = runs.naive()?;
    let (o, n) = (ogm.record.max_direction_product, naive.record.max_direction_product);
    verdict(o < 1e-10 && n > 1e-3, format!("projected max |<update, direction>| {o:e}, naive {n:e}"))
}

fn c11(runs: &Runs) -> Result<Verdict> {
    let (spi, _) = runs.spi()?;
    let joint = runs.run(&runs.with_method(Method::Joint))?;
    let s = spi.config.strategy.name();
    let (j, c) = (pts(joint.all("full", s)), pts(spi.all("full", s)));
    verdict(j >= c, format!("full {s}: joint {j:.2}, continual {c:.2}"))
}

fn small_config(method: Method) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 3;
    cfg.method = method;
    // Three classes per task keeps enough class-free images for near-OOD.
    cfg.benchmark.num_classes = 6;
    cfg.benchmark.first_task = 3;
    cfg.benchmark.task_step = 3;
    cfg.benchmark.images_per_task = 40;
    cfg.pretrain.images = 60;
    cfg.pretrain.epochs = 3;
    cfg.schedule.epochs = 4;
    cfg
}

fn dir_contents(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for e in fs::read_dir(dir)? {
        let e = e?;
        files.push((e.file_name().to_string_lossy().into_owned(), fs::read(e.path())?));
    }
    files.sort();
    Ok(files)
}

fn c12(_: &Runs) -> Result<Verdict> {
    let holder = tempfile::tempdir()?;
    let tmp = holder.path();
    let mut notes = Vec::new();
    let mut pass = true;
    for method in [Method::Spi, Method::Ogm] {
        let cfg = small_config(method);
        let (a, b) = (tmp.join(format!("{}-a", method.name())), tmp.join(format!("{}-b", method.name())));
        experiment::run_experiment(&cfg, Some(&a))?;
        experiment::run_experiment(&cfg, Some(&b))?;
        let (fa, fb) = (dir_contents(&a)?, dir_contents(&b)?);
        let same = fa == fb;
        pass &= same;
        notes.push(format!("{} rerun: {} files {}", method.name(), fa.len(), if same { "byte-equal" } else { "DIFFER" }));
    }
    let mut seq = small_config(Method::Spi);
    seq.schedule.parallel = false;
    let dir = tmp.join("sequential");
    experiment::run_experiment(&seq, Some(&dir))?;
    let same = fs::read(dir.join("checkpoint.bin"))? == fs::read(tmp.join("cogcas-spi-a").join("checkpoint.bin"))?;
    pass &= same;
    notes.push(format!("sequential vs parallel checkpoint {}", if same { "byte-equal" } else { "DIFFERS" }));
    verdict(pass, notes.join("; "))
}

trait MetricsRow {
    fn metrics_row(&self, mode: &str, strategy: &str) -> &cogcas_core::metrics::MetricsTable;
}

impl MetricsRow for Outcome {
    fn metrics_row(&self, mode: &str, strategy: &str) -> &cogcas_core::metrics::MetricsTable {
        &self
            .metrics
            .iter()
            .find(|(m, s, _)| m == mode && s == strategy)
            .expect("evaluated mode and strategy")
            .2
    }
}

type Check = fn(&Runs) -> Result<Verdict>;

const CRITERIA: [(usize, &str, Check); 12] = [
    (1, "exact zero forgetting under isolation", c1),
    (2, "quadratic term and block-diagonal Hessians", c2),
    (3, "shared-tail contrast", c3),
    (4, "recurrence identities and Taylor scaling", c4),
    (5, "gradient checks", c5),
    (6, "per-task curves", c6),
    (7, "mode ordering", c7),
    (8, "fusion ordering under forced overlap", c8),
    (9, "router quality", c9),
    (10, "projected updates", c10),
    (11, "joint upper bound", c11),
    (12, "determinism", c12),
];

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let runs = Runs::new();

    let mut passed = 0;
    let mut ran = 0;
    for (id, name, check) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let (pass, detail) = match check(&runs) {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        passed += usize::from(pass);
        println!(
            "{} criterion {id:>2} {name}: {detail} [{}]",
            if pass { "PASS" } else { "FAIL" },
            secs(t.elapsed())
        );
    }
    println!("{passed}/{ran} criteria passed");
    if strict && passed < ran {
        std::process::exit(1);
    }
}
