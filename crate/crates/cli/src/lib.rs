//! Subcommands of the `resdense` binary.
//!
//! Each command is a function of its flags and the files it reads; reruns
//! with the same inputs write byte-identical outputs.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use resdense::data::{discover_series, load_preprocessed, scan_dataset, Manifest, Split};
use resdense::eval::{self, SeriesPrediction, SlicePrediction};
use resdense::gradcheck;
use resdense::model::export_features;
use resdense::train::{self, load_checkpoint, TrainConfig};
use resdense::{Error, Model, ModelConfig, Result};

/// Slices per inference batch in `predict`.
const PREDICT_BATCH: usize = 32;

#[derive(Debug, Parser)]
#[command(name = "resdense", version, about = "Res-Dense fusion classifier for CT-scan series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan a labeled data root and write a split manifest.
    Prepare(PrepareArgs),
    /// Train a model from a manifest.
    Train(TrainArgs),
    /// Predict series-level class scores.
    Predict(PredictArgs),
    /// Score predictions against manifest labels.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every differentiable op and a small model.
    Gradcheck(GradcheckArgs),
    /// Write the fused feature map of one image as a tiled PGM.
    ExportFeatures(ExportArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub data_root: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of each class's series assigned to training.
    #[arg(long, default_value_t = 0.75)]
    pub split: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model configuration JSON. Defaults to the micro configuration.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Training configuration JSON; flags below override its fields.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// [default: 20]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 1e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seeds both parameter initialization and training. [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub phase1_epochs: Option<usize>,
    #[arg(long)]
    pub freeze_boundary: Option<usize>,
    /// Square input size for the default micro configuration.
    #[arg(long, default_value_t = 32)]
    pub input_size: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A series directory or a data root holding many.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-op relative error bound.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Bound for the model-level sampled check.
    #[arg(long, default_value_t = 1e-3)]
    pub model_tolerance: f64,
    /// Optional JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Configuration actually used by a training run.
#[derive(Debug, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub manifest: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Exit status of a successful command: 0, or 1 when a check it ran failed.
pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Prepare(a) => prepare(&a).map(|()| 0),
        Command::Train(a) => train_cmd(&a).map(|()| 0),
        Command::Predict(a) => predict(&a).map(|()| 0),
        Command::Evaluate(a) => evaluate(&a).map(|()| 0),
        Command::Gradcheck(a) => gradcheck_cmd(&a),
        Command::ExportFeatures(a) => export(&a).map(|()| 0),
    }
}

/// 2 for usage and input problems, 1 for everything else.
pub fn exit_code(err: &Error) -> u8 {
    if err.is_input_error() {
        2
    } else {
        1
    }
}

pub fn prepare(a: &PrepareArgs) -> Result<()> {
    let scan = scan_dataset(&a.data_root)?;
    let manifest = Manifest::from_scan(&scan, a.split, a.seed)?;
    manifest.save(&a.out)?;
    for (label, class) in manifest.class_names.iter().enumerate() {
        let mine = manifest.samples.iter().filter(|e| &e.class == class);
        let (mut tr, mut va) = (0, 0);
        for e in mine {
            match e.split {
                Split::Train => tr += 1,
                Split::Val => va += 1,
            }
        }
        println!("class {label} {class}: {} series ({tr} train, {va} val)", tr + va);
    }
    Ok(())
}

pub fn resolve_train(a: &TrainArgs) -> Result<ResolvedConfig> {
    let mut model = match &a.model_config {
        Some(p) => eval::read_json::<ModelConfig>(p)?,
        None => ModelConfig::micro(a.input_size),
    };
    let mut cfg = match &a.train_config {
        Some(p) => eval::read_json::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.phase1_epochs {
        cfg.phase1_epochs = v;
    }
    if a.freeze_boundary.is_some() {
        cfg.freeze_boundary = a.freeze_boundary;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        model.seed = seed;
    }
    cfg.validate()?;
    model.validate()?;
    Ok(ResolvedConfig {
        manifest: a.manifest.clone(),
        model,
        train: cfg,
    })
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let resolved = resolve_train(a)?;
    let manifest = Manifest::load(&a.manifest)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    eval::write_json(&resolved, &a.out_dir.join("config.json"))?;
    let mut model = Model::<f32>::build(&resolved.model)?;
    let outcome = train::train(&mut model, &manifest, &resolved.train, Some(&a.out_dir))?;
    let best = &outcome.records[outcome.best_epoch];
    println!(
        "best epoch {} val_loss {:.6} val_macro_f1 {:.6}",
        best.epoch, best.val_loss, best.val_macro_f1
    );
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let size = ck.model.config().input_size;
    let series = discover_series(&a.input)?;
    if series.is_empty() {
        return Err(Error::Data(format!("no series with slices under {}", a.input.display())));
    }
    let mut out = Vec::with_capacity(series.len());
    for s in &series {
        let mut slices = Vec::with_capacity(s.slice_paths.len());
        for chunk in s.slice_paths.chunks(PREDICT_BATCH) {
            let images = chunk
                .iter()
                .map(|p| load_preprocessed(p, size))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = images.iter().collect();
            for (path, probs) in chunk.iter().zip(eval::predict_probs(&ck.model, &refs)?) {
                slices.push(SlicePrediction {
                    series_id: s.series_id.clone(),
                    slice_path: path.clone(),
                    probs,
                });
            }
        }
        out.push(eval::aggregate_series(&s.series_id, &slices)?);
    }
    out.sort_by(|x, y| x.series_id.cmp(&y.series_id));
    if let Some(w) = out.windows(2).find(|w| w[0].series_id == w[1].series_id) {
        return Err(Error::Data(format!("series id {:?} found twice under input", w[0].series_id)));
    }
    eval::write_json(&out, &a.out)?;
    println!("predicted {} series", out.len());
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let predictions: Vec<SeriesPrediction> = eval::read_json(&a.predictions)?;
    let manifest = Manifest::load(&a.manifest)?;
    let report = eval::evaluate(&predictions, &manifest.labels()?, manifest.num_classes())?;
    eval::write_json(&report, &a.out)?;
    println!("macro_f1 {:.6}", report.macro_f1);
    Ok(())
}

pub fn gradcheck_cmd(a: &GradcheckArgs) -> Result<u8> {
    let mut reports = gradcheck::check_ops(a.seed, a.tolerance)?;
    reports.extend(gradcheck::check_model(
        &gradcheck::tiny_model_config(a.seed),
        a.seed,
        20,
        a.model_tolerance,
    )?);
    for r in &reports {
        println!(
            "{} {:<18} checked {:>4} max_rel_err {:.3e} tolerance {:.1e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.checked,
            r.max_rel_err,
            r.tolerance
        );
    }
    if let Some(out) = &a.out {
        eval::write_json(&reports, out)?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        eprintln!("{failed} gradient check(s) failed");
        return Ok(1);
    }
    Ok(0)
}

pub fn export(a: &ExportArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let image = load_preprocessed(&a.image, ck.model.config().input_size)?;
    let grid = export_features(&ck.model, &image)?;
    grid.write_pgm(&a.out)?;
    println!("wrote {}×{} feature grid", grid.width, grid.height);
    Ok(())
}
