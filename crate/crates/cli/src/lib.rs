//! Subcommands of the `nextvlad` binary.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use nextvlad::config::RunConfig;
use nextvlad::data::{gen_synthetic, load_eigenvalues, read_dataset, write_dataset};
use nextvlad::metrics::{per_class_report, write_predictions_csv};
use nextvlad::model::{ModelCount, SecgParams, StreamConfig};
use nextvlad::params::{ParamKind, ParamTree};
use nextvlad::train::{load_checkpoint, save_checkpoint, LogRow};
use nextvlad::verify;
use nextvlad::vlad::{param_count_netvlad, param_count_nextvlad, NeXtVladParams, NetVladParams};
use nextvlad::{Aggregation, Dataset, Model, ModelConfig, NetworkParams, SyntheticSpec, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Parser)]
#[command(name = "nextvlad", version, about = "NeXtVLAD video classification toolkit")]
#[command(after_help = config_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

fn config_help() -> String {
    format!("Configuration keys (config file lines `key = value`, or `--set key=value`):\n\n{}", RunConfig::help_text())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic FAV1 dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint, a metrics log and the config echo.
    #[command(after_help = config_help())]
    Train(TrainArgs),
    /// Report GAP@20 and per-class average precision of a checkpoint.
    Eval(EvalArgs),
    /// Write the top-20 predictions of a checkpoint as CSV.
    Predict(PredictArgs),
    /// Compare closed-form parameter counts with the allocated census.
    #[command(after_help = config_help())]
    ParamCount(ParamCountArgs),
    /// Run the gradient, reference, masking, metric and count self-checks.
    Verify,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 2000)]
    pub videos: usize,
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub visual_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub audio_dim: usize,
    #[arg(long, default_value_t = 8)]
    pub min_frames: usize,
    #[arg(long, default_value_t = 20)]
    pub max_frames: usize,
    #[arg(long, default_value_t = 1)]
    pub min_labels: usize,
    /// Maximum number of labels per video.
    #[arg(long, default_value_t = 3)]
    pub labels_per_video: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Netvlad,
    Nextvlad,
}

/// Config sources shared by commands that build a model.
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Number of experts (1 or 3).
    #[arg(long)]
    pub mixture: Option<usize>,
}

impl ConfigArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.merge_text(&text)?;
        }
        if let Some(m) = self.model {
            cfg.set("model.aggregation", if m == ModelKind::Netvlad { "netvlad" } else { "nextvlad" })?;
        }
        if let Some(m) = self.mixture {
            cfg.set("model.mixture", &m.to_string())?;
        }
        for pair in &self.overrides {
            cfg.set_pair(pair)?;
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Dataset for periodic evaluation; the training set when absent.
    #[arg(long)]
    pub eval_dataset: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Continue from a checkpoint; its stored config is the base.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub kd_temperature: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub lr_staircase: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Skip the per-class table.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamCountArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::ParamCount(a) => cmd_param_count(&a),
        Command::Verify => cmd_verify(),
    }
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_videos: a.videos,
        num_classes: a.classes,
        visual_dim: a.visual_dim,
        audio_dim: a.audio_dim,
        min_frames: a.min_frames,
        max_frames: a.max_frames,
        min_labels: a.min_labels,
        max_labels: a.labels_per_video,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    let d = gen_synthetic(&spec)?;
    write_dataset(&d, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let frames: usize = d.records.iter().map(|r| r.frames(d.visual_dim)).sum();
    let labels: usize = d.records.iter().map(|r| r.labels.len()).sum();
    println!(
        "wrote {}: {} videos, {} classes, dims {}/{}, {:.2} frames and {:.2} labels per video",
        a.out.display(),
        d.len(),
        d.num_classes,
        d.visual_dim,
        d.audio_dim,
        frames as f64 / d.len().max(1) as f64,
        labels as f64 / d.len().max(1) as f64,
    );
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

/// Pins `auto` dimensions to the dataset so the stored config is
/// self-contained.
fn resolve(cfg: &mut RunConfig, d: &Dataset) -> Result<ModelConfig> {
    let m = cfg.model_config(d.visual_dim, d.audio_dim, d.num_classes)?;
    cfg.set("model.video_dim", &m.video_dim.to_string())?;
    cfg.set("model.audio_dim", &m.audio_dim.to_string())?;
    cfg.set("model.num_classes", &m.num_classes.to_string())?;
    Ok(m)
}

fn build_model(cfg: &RunConfig, mcfg: ModelConfig, seed: u64) -> Result<Model<f32>> {
    let eig = match cfg.eigenvalues_path() {
        Some(p) if mcfg.reverse_whitening => Some(load_eigenvalues(&p, Some(mcfg.video_dim))?),
        _ => None,
    };
    Ok(Model::init(mcfg, eig, seed)?)
}

/// The one-line GAP summary shared by `train` and `eval`.
pub fn gap_line(gap: f64) -> String {
    format!("gap@20 = {gap:.6}")
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let train = load_data(&a.dataset)?;
    let eval = a.eval_dataset.as_deref().map(load_data).transpose()?;
    let resumed = a
        .resume
        .as_ref()
        .map(|p| load_checkpoint::<f32>(p).with_context(|| format!("reading checkpoint {}", p.display())))
        .transpose()?;
    let mut cfg = match &resumed {
        Some(c) => RunConfig::parse_text(&c.config)?,
        None => RunConfig::default(),
    };
    a.config.apply(&mut cfg)?;
    if let Some(t) = a.kd_temperature {
        cfg.set("kd.temperature", &t.to_string())?;
    }
    if let Some(s) = a.steps {
        cfg.set("train.steps", &s.to_string())?;
    }
    if let Some(lr) = a.lr {
        cfg.set("train.base_lr", &lr.to_string())?;
    }
    if let Some(s) = a.seed {
        cfg.set("train.seed", &s.to_string())?;
    }
    if a.deterministic {
        cfg.set("train.deterministic", "true")?;
    }
    if a.lr_staircase {
        cfg.set("train.lr_staircase", "true")?;
    }
    let mcfg = resolve(&mut cfg, &train)?;
    let tcfg = cfg.train_config()?;
    let model = build_model(&cfg, mcfg, tcfg.seed)?;
    let mut trainer = match &resumed {
        Some(c) => Trainer::from_checkpoint(c, model, tcfg)?,
        None => Trainer::new(model, tcfg)?,
    };

    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let text = cfg.to_text();
    fs::write(a.out_dir.join(CONFIG_FILE), &text)?;
    eprint!("{text}");
    eprintln!(
        "training {} ({} weights) for {} steps on {} videos",
        mcfg.aggregation.name(),
        trainer.model.census().weights,
        tcfg.total_steps(train.len()),
        train.len()
    );

    let mut log = BufWriter::new(File::create(a.out_dir.join(METRICS_FILE))?);
    writeln!(log, "{}", LogRow::CSV_HEADER)?;
    let gap = trainer.run(&train, eval.as_ref(), |row| {
        writeln!(log, "{}", row.to_csv())?;
        if let Some(g) = row.gap {
            eprintln!("step {:>6}  lr {:.3e}  loss {:.5}  gap {:.4}", row.step, row.lr, row.loss, g);
        }
        Ok(())
    })?;
    log.flush()?;
    save_checkpoint(&trainer.to_checkpoint(&text), a.out_dir.join(CHECKPOINT_FILE))?;
    match gap {
        Some(g) => println!("{}", gap_line(g)),
        None => println!("no steps run; checkpoint already at step {}", trainer.step),
    }
    Ok(())
}

fn restore(checkpoint: &Path, data: &Dataset) -> Result<Trainer<f32>> {
    let ckpt = load_checkpoint::<f32>(checkpoint).with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let mut cfg = RunConfig::parse_text(&ckpt.config)?;
    let mcfg = resolve(&mut cfg, data)?;
    let tcfg = cfg.train_config()?;
    let model = build_model(&cfg, mcfg, tcfg.seed)?;
    Ok(Trainer::from_checkpoint(&ckpt, model, tcfg)?)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let data = load_data(&a.dataset)?;
    let mut trainer = restore(&a.checkpoint, &data)?;
    let ev = trainer.evaluate(&data)?;
    println!("{}", gap_line(ev.gap));
    if !a.quiet {
        println!("{:>6} {:>9} {:>9} {:>6} {:>8}", "class", "positives", "predicted", "hits", "ap");
        for r in per_class_report(&ev.predictions, data.num_classes) {
            let ap = r.ap.map_or("-".to_string(), |v| format!("{v:.4}"));
            println!("{:>6} {:>9} {:>9} {:>6} {:>8}", r.class, r.positives, r.predicted, r.hits, ap);
        }
    }
    Ok(())
}

pub fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let data = load_data(&a.dataset)?;
    let mut trainer = restore(&a.checkpoint, &data)?;
    let ev = trainer.evaluate(&data)?;
    let ids: Vec<String> = data.records.iter().map(|r| r.id.clone()).collect();
    match &a.out {
        Some(p) => write_predictions_csv(BufWriter::new(File::create(p)?), &ids, &ev.predictions)?,
        None => write_predictions_csv(io::stdout().lock(), &ids, &ev.predictions)?,
    }
    Ok(())
}

/// One line of the parameter table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountRow {
    pub component: String,
    pub formula: u64,
    pub census: u64,
}

/// Counted weights of a shape tree, without allocating it.
fn shape_census(tree: &impl ParamTree<Vec<usize>>) -> u64 {
    let mut n = 0;
    tree.visit_leaves("", &mut |name, shape| {
        if ParamKind::of(name).counted() {
            n += shape.iter().product::<usize>() as u64;
        }
    });
    n
}

pub fn count_rows(m: &ModelConfig) -> Result<Vec<CountRow>> {
    let video = match m.video_stream()? {
        StreamConfig::NetVlad(c) => ("netvlad video layer", param_count_netvlad(&c), shape_census(&NetVladParams::shapes(&c))),
        StreamConfig::NeXtVlad(c) => {
            ("nextvlad video layer", param_count_nextvlad(&c)?, shape_census(&NeXtVladParams::shapes(&c)))
        }
    };
    let counts = ModelCount::of(m)?;
    Ok(vec![
        CountRow {
            component: video.0.into(),
            formula: video.1,
            census: video.2,
        },
        CountRow {
            component: "se context gating".into(),
            formula: counts.se,
            census: shape_census(&SecgParams::shapes(m.hidden, m.se_ratio)),
        },
        CountRow {
            component: "full network".into(),
            formula: counts.total(),
            census: shape_census(&NetworkParams::shapes(m)?),
        },
    ])
}

/// Renders the table; fails when any row disagrees.
pub fn render_counts(rows: &[CountRow]) -> Result<String> {
    let mut s = format!("{:<24} {:>14} {:>14}\n", "component", "closed form", "census");
    for r in rows {
        let flag = if r.formula == r.census { "" } else { "  MISMATCH" };
        s.push_str(&format!("{:<24} {:>14} {:>14}{flag}\n", r.component, r.formula, r.census));
    }
    if rows.iter().any(|r| r.formula != r.census) {
        bail!("closed-form and census counts disagree\n{s}");
    }
    Ok(s)
}

/// `auto` dimensions default to the published feature sizes.
pub fn param_count_config(a: &ParamCountArgs) -> Result<ModelConfig> {
    let mut cfg = RunConfig::default();
    a.config.apply(&mut cfg)?;
    let p = ModelConfig::published();
    Ok(cfg.model_config(p.video_dim, p.audio_dim, p.num_classes)?)
}

pub fn cmd_param_count(a: &ParamCountArgs) -> Result<()> {
    let m = param_count_config(a)?;
    let desc = match m.aggregation {
        Aggregation::NetVlad => format!("netvlad K={}", m.clusters),
        Aggregation::NeXtVlad { expansion, groups } => format!("nextvlad λ={expansion} G={groups} K={}", m.clusters),
    };
    println!("{desc} N={} H={} r={} C={} experts={}", m.video_dim, m.hidden, m.se_ratio, m.num_classes, m.experts);
    print!("{}", render_counts(&count_rows(&m)?)?);
    Ok(())
}

pub fn cmd_verify() -> Result<()> {
    let results = verify::run_all()?;
    let mut failed = 0;
    for r in &results {
        println!("{} {:<40} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", results.len());
    }
    Ok(())
}
