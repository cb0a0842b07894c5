//! `cogcas`: generate benchmarks, train, evaluate checkpoints, run the
//! forgetting analysis and aggregate reports.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cogcas_core::evaluate::ModeKind;
use cogcas_core::experiment::{self, AnalysisOptions, ExperimentConfig, Method};
use cogcas_core::formats::{self, Checkpoint};
use cogcas_core::inference::Strategy;
use cogcas_core::metrics::metrics_csv;
use cogcas_core::synth::generate_benchmark;
use cogcas_core::trainer::FeatureBank;

#[derive(Parser)]
#[command(name = "cogcas", version, about = "Cascade continual segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a benchmark and write its description and label maps.
    Gen(GenArgs),
    /// Train one method and write the full artifact directory.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint under one mode and fusion strategy.
    Eval(EvalArgs),
    /// Forgetting rates, Hessian terms and Taylor exponents of a cascade run.
    Analyze(AnalyzeArgs),
    /// Merge the metrics tables of several runs.
    Report(ReportArgs),
}

/// Configuration overrides shared by `gen` and `train`.
#[derive(Args)]
struct Overrides {
    /// Base configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; overrides the file.
    #[arg(long)]
    seed: Option<u64>,
    /// cogcas-spi, cogcas-shared-tail, joint, naive or ogm.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Headline fusion strategy.
    #[arg(long)]
    strategy: Option<String>,
    /// Headline inference mode.
    #[arg(long)]
    mode: Option<String>,
    /// Any other configuration key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = &self.method {
            cfg.method = Method::parse(m)?;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(s) = &self.strategy {
            cfg.set("eval.strategy", s)?;
        }
        if let Some(m) = &self.mode {
            cfg.set("eval.mode", m)?;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("expected key=value, got {kv:?}"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = "logits")]
    strategy: String,
    #[arg(long, default_value = "full")]
    mode: String,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    run: PathBuf,
    /// Also measure Hessians over the head blocks.
    #[arg(long)]
    hessian: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories to merge.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Write the merged table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen(a) => gen(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Analyze(a) => analyze(&a),
        Command::Report(a) => report(&a),
    }
}

fn gen(a: &GenArgs) -> Result<()> {
    let cfg = a.overrides.resolve()?;
    let stream = generate_benchmark(&cfg.resolved_benchmark())?;
    fs::create_dir_all(&a.out)?;
    formats::write_file(&a.out.join("config.txt"), cfg.to_text().as_bytes())?;
    formats::write_file(&a.out.join("benchmark.txt"), stream.describe().as_bytes())?;
    let classes = (cfg.benchmark.num_classes + 1) as u16;
    for task in &stream.tasks {
        let dir = a.out.join(format!("task{}", task.index));
        for (split, samples) in [("train", &task.train), ("val", &task.val)] {
            let sub = dir.join(split);
            fs::create_dir_all(&sub)?;
            for s in samples {
                let map = if split == "train" { &s.label } else { &s.truth };
                formats::write_file(&sub.join(format!("{:06}.cclm", s.id)), &formats::encode_label_map(map, classes))?;
            }
        }
    }
    println!("wrote {} tasks to {}", stream.num_tasks(), a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    if a.overrides.seed.is_none() || a.overrides.config.is_none() {
        bail!("train needs --seed, --config and --out");
    }
    let cfg = a.overrides.resolve()?;
    let outcome = experiment::run_experiment(&cfg, Some(&a.out))?;
    for (mode, strategy, t) in &outcome.metrics {
        println!(
            "{} {mode} {strategy}: all {}",
            cfg.method.name(),
            t.all.map_or("nan".into(), |v| format!("{:.2}", 100.0 * v))
        );
    }
    if let Some(p) = &outcome.phase1 {
        println!("router: mAP {:.4} precision {:.4} recall {:.4}", p.map, p.precision, p.recall);
    }
    for w in &outcome.record.warnings {
        eprintln!("warning: {w}");
    }
    println!("artifacts in {}", a.out.display());
    Ok(())
}

fn load_run(dir: &Path) -> Result<(ExperimentConfig, Checkpoint)> {
    let cfg = ExperimentConfig::parse(&fs::read_to_string(dir.join("config.txt")).context("reading config.txt")?)?;
    let ckpt = formats::decode_checkpoint(&fs::read(dir.join("checkpoint.bin")).context("reading checkpoint.bin")?)?;
    Ok((cfg, ckpt))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (cfg, ckpt) = load_run(&a.run)?;
    let strategy = Strategy::parse(&a.strategy)?;
    let mode = ModeKind::ALL
        .into_iter()
        .find(|m| m.name() == a.mode)
        .with_context(|| format!("unknown mode {:?}", a.mode))?;
    let table = experiment::evaluate_checkpoint(&cfg, &ckpt, mode, strategy)?;
    let stream = generate_benchmark(&cfg.resolved_benchmark())?;
    let classes = stream.classes_up_to(stream.num_tasks());
    let row = (cfg.method.name().to_string(), mode.name().to_string(), strategy.name().to_string(), table);
    let csv = metrics_csv(std::slice::from_ref(&row), &classes);
    let name = format!("eval_{}_{}.csv", mode.name(), strategy.name());
    formats::write_file(&a.run.join(&name), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let (mut cfg, ckpt) = load_run(&a.run)?;
    let Checkpoint::Cascade(model) = ckpt else {
        bail!("forgetting analysis needs a cascade checkpoint");
    };
    cfg.analysis.hessian |= a.hessian;
    let stream = generate_benchmark(&cfg.resolved_benchmark())?;
    let bank = FeatureBank::build(&model, &stream)?;
    let opts = AnalysisOptions::from_config(&cfg.analysis, cfg.method == Method::SharedTail);
    let analysis = experiment::analyze_forgetting(&model, &stream, &bank, &cfg.loss, &opts)?;
    let csv = analysis.report.to_csv();
    formats::write_file(&a.run.join("forgetting.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    let mut header: Option<String> = None;
    let mut out = String::new();
    for run in &a.runs {
        let text = fs::read_to_string(run.join("metrics.csv")).with_context(|| format!("reading {}", run.display()))?;
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let h = lines.next().unwrap_or_default().to_string();
        match &header {
            None => {
                out.push_str("run,");
                out.push_str(&h);
                out.push('\n');
                header = Some(h);
            }
            Some(prev) if *prev != h => bail!("{} has a different class layout", run.display()),
            Some(_) => {}
        }
        for l in lines {
            out.push_str(&format!("{},{l}\n", run.display()));
        }
    }
    match &a.out {
        Some(p) => formats::write_file(p, out.as_bytes())?,
        None => print!("{out}"),
    }
    Ok(())
}
