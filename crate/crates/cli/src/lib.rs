//! Command-line front end: data synthesis, the training phases, single-image
//! deblurring and dataset evaluation.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use umsn_core::checkpoint::{Checkpoint, Phase};
use umsn_core::evaluation::{evaluate_dataset, Deblur, EvalMasks, EvalOptions, Identity};
use umsn_core::io::read_json;
use umsn_core::losses::FeatureExtractor;
use umsn_core::network::umsn_forward;
use umsn_core::semantics::{snet_forward, ClassId, SNetModel, SemanticMaskSet};
use umsn_core::synthesis::{
    build_dataset, write_kernel_bank, Corpus, DatasetConfig, DatasetManifest, MaskSource, TrainingSample,
};
use umsn_core::training::{train_snet, train_stage1, train_umsn, MaskMode, TrainConfig, UmsnInit};
use umsn_core::Image;

/// Caps data-loading and per-sample parallelism.
pub const WORKERS_ENV: &str = "UMSN_NUM_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "umsn", version, about = "Semantic multi-stream face deblurring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a bank of synthetic motion-blur kernels
    SynthKernels(SynthKernels),
    /// Generate a blurry/clean training set with masks
    SynthDataset(SynthDataset),
    /// Train (or fine-tune) the segmentation network
    TrainSnet(TrainArgs),
    /// Train the first-stage network of one class
    TrainStage1(TrainStage1),
    /// Train the multi-stream network from four first-stage checkpoints
    TrainUmsn(TrainUmsn),
    /// Deblur one image
    Deblur(DeblurArgs),
    /// Score a model on a dataset manifest
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthKernels {
    /// Dataset configuration (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Number of kernels to write [default: the configured pool size]
    #[arg(long)]
    pub count: Option<usize>,
    /// Override the configured master seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthDataset {
    /// Dataset configuration (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (must not exist or be empty)
    #[arg(long)]
    pub out: PathBuf,
    /// Directory of clean face PNGs [default: procedurally rendered faces]
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Eleven-label parsing maps matching --images by file name
    #[arg(long, requires = "images", conflicts_with_all = ["class_masks", "snet_checkpoint"])]
    pub labels: Option<PathBuf>,
    /// Four-class mask PNGs matching --images by file name
    #[arg(long, requires = "images", conflicts_with = "snet_checkpoint")]
    pub class_masks: Option<PathBuf>,
    /// Segment --images with this segmentation checkpoint
    #[arg(long, requires = "images")]
    pub snet_checkpoint: Option<PathBuf>,
    /// Number of procedurally rendered faces
    #[arg(long, default_value_t = 32)]
    pub faces: usize,
    /// Side of the rendered faces [default: 5/4 of the patch size]
    #[arg(long)]
    pub face_size: Option<usize>,
    /// Override the configured master seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training configuration (JSON); "phase" may be omitted
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for the log and checkpoints
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset manifest [default: the configured dataset]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Checkpoint to resume from (or to fine-tune)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Override the configured master seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the configured width multiplier
    #[arg(long)]
    pub width: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainStage1 {
    #[command(flatten)]
    pub common: TrainArgs,
    /// Semantic class to train (1-4)
    #[arg(long, required = true)]
    pub class: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainUmsn {
    #[command(flatten)]
    pub common: TrainArgs,
    /// First-stage checkpoints, one per class [default: the configured list]
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub stage1: Vec<PathBuf>,
    /// Segmentation checkpoint for mask mode "snet"
    #[arg(long)]
    pub snet_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DeblurArgs {
    /// Blurry input PNG
    #[arg(long = "in")]
    pub input: PathBuf,
    /// "snet" or a four-class mask PNG
    #[arg(long)]
    pub masks: String,
    /// Multi-stream network checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Segmentation checkpoint, needed with --masks snet
    #[arg(long)]
    pub snet_checkpoint: Option<PathBuf>,
    /// Output PNG
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Dataset manifest (file or dataset directory)
    #[arg(long)]
    pub manifest: PathBuf,
    /// Multi-stream network checkpoint [default: score the blurry inputs unchanged]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Report directory
    #[arg(long)]
    pub out: PathBuf,
    /// Network input masks: "stored" or "snet"
    #[arg(long, default_value = "stored")]
    pub masks: String,
    /// Segmentation checkpoint, needed with --masks snet
    #[arg(long)]
    pub snet_checkpoint: Option<PathBuf>,
    /// Feature-extractor weights (JSON) [default: seeded random extractor]
    #[arg(long)]
    pub extractor: Option<PathBuf>,
    /// Seed of the default feature extractor
    #[arg(long, default_value_t = 0)]
    pub extractor_seed: u64,
    /// Write blurry | deblurred | truth strips
    #[arg(long)]
    pub grids: bool,
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 success, 1 fatal error, 2 partial evaluation failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprintln!("{}", one_line(&e.to_string()));
            return 1;
        }
    };
    configure_workers();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            1
        }
    }
}

/// Collapses a multi-line diagnostic, dropping usage hints.
fn one_line(msg: &str) -> String {
    msg.lines()
        .take_while(|l| !l.starts_with("Usage:"))
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with("For more information"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn configure_workers() {
    if let Some(n) = std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            // fails only when a pool already exists, which is harmless
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::SynthKernels(a) => synth_kernels(a),
        Command::SynthDataset(a) => synth_dataset(a),
        Command::TrainSnet(a) => cmd_train_snet(a),
        Command::TrainStage1(a) => cmd_train_stage1(a),
        Command::TrainUmsn(a) => cmd_train_umsn(a),
        Command::Deblur(a) => deblur(a),
        Command::Evaluate(a) => return evaluate(a),
    }?;
    Ok(0)
}

fn load_dataset_config(path: &Path, seed: Option<u64>) -> Result<DatasetConfig> {
    let mut cfg: DatasetConfig = read_json(path)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs `write` against a fresh sibling directory, then renames it to `out`.
fn publish_dir(out: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if out.exists() {
        let empty = fs::read_dir(out)
            .with_context(|| format!("reading {}", out.display()))?
            .next()
            .is_none();
        if !empty {
            bail!("output directory {} already exists and is not empty", out.display());
        }
        fs::remove_dir(out).with_context(|| format!("removing {}", out.display()))?;
    }
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
    let tmp = tempfile::Builder::new()
        .prefix(".umsn-")
        .tempdir_in(&parent)
        .with_context(|| format!("creating a temporary directory in {}", parent.display()))?;
    write(tmp.path())?;
    let kept = tmp.keep();
    fs::rename(&kept, out).with_context(|| format!("moving output into {}", out.display()))?;
    Ok(())
}

fn synth_kernels(a: SynthKernels) -> Result<()> {
    let cfg = load_dataset_config(&a.config, a.seed)?;
    let count = a.count.unwrap_or(cfg.num_kernels);
    publish_dir(&a.out, |dir| {
        write_kernel_bank(&cfg, count, dir)?;
        Ok(())
    })?;
    log::info!("wrote {count} kernels to {}", a.out.display());
    Ok(())
}

fn synth_dataset(a: SynthDataset) -> Result<()> {
    let cfg = load_dataset_config(&a.config, a.seed)?;
    let corpus = match &a.images {
        Some(images) => {
            let source = if let Some(dir) = &a.labels {
                MaskSource::LabelDir(dir.clone())
            } else if let Some(dir) = &a.class_masks {
                MaskSource::ClassDir(dir.clone())
            } else if let Some(ck) = &a.snet_checkpoint {
                MaskSource::Model(Box::new(Checkpoint::load(ck)?.snet()?))
            } else {
                bail!("--images needs one of --labels, --class-masks or --snet-checkpoint");
            };
            Corpus::load_dir(images, &source)?
        }
        None => {
            let side = a.face_size.unwrap_or((cfg.patch_size * 5 / 4 + 1) & !1);
            Corpus::synthetic(cfg.master_seed, a.faces, side, side)
        }
    };
    publish_dir(&a.out, |dir| {
        build_dataset(&corpus, &cfg, dir)?;
        Ok(())
    })?;
    log::info!("wrote {} samples to {}", cfg.num_samples, a.out.display());
    Ok(())
}

/// Reads a training configuration, filling in the phase when absent.
fn load_train_config(args: &TrainArgs, default_phase: Phase, class: Option<ClassId>) -> Result<TrainConfig> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", args.config.display()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| anyhow!("{}: configuration must be a JSON object", args.config.display()))?;
    obj.entry("phase")
        .or_insert_with(|| serde_json::Value::String(default_phase.name().into()));
    let mut cfg: TrainConfig =
        serde_json::from_value(value).with_context(|| format!("parsing {}", args.config.display()))?;
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    if let Some(w) = args.width {
        cfg.width_multiplier = w;
    }
    if class.is_some() {
        cfg.class_index = class;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Paths inside a configuration are relative to the configuration file.
fn config_relative(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new("")).join(p)
    }
}

fn load_training_data(args: &TrainArgs, cfg: &TrainConfig) -> Result<Vec<TrainingSample>> {
    let path = match (&args.manifest, &cfg.dataset) {
        (Some(m), _) => m.clone(),
        (None, Some(d)) => config_relative(&args.config, d),
        (None, None) => bail!("no dataset: pass --manifest or set \"dataset\" in the configuration"),
    };
    Ok(DatasetManifest::load(&path)?.load_all()?)
}

fn resolve_extractor(args: &TrainArgs, cfg: &mut TrainConfig) {
    if let Some(p) = &cfg.extractor {
        cfg.extractor = Some(config_relative(&args.config, p));
    }
}

fn cmd_train_snet(a: TrainArgs) -> Result<()> {
    let cfg = load_train_config(&a, Phase::Snet, None)?;
    if !matches!(cfg.phase, Phase::Snet | Phase::SnetFinetune) {
        bail!("train-snet needs phase snet or snet_finetune, the configuration says {}", cfg.phase.name());
    }
    let data = load_training_data(&a, &cfg)?;
    let resume = a.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let t = train_snet(&cfg, &data, resume.as_ref(), Some(&a.out))?;
    if let Some(r) = t.history.last() {
        log::info!("finished at iteration {} with loss {:.6}", r.iter, r.loss);
    }
    Ok(())
}

fn cmd_train_stage1(a: TrainStage1) -> Result<()> {
    let class = ClassId::new(a.class.expect("required by the parser"))?;
    let mut cfg = load_train_config(&a.common, Phase::Stage1, Some(class))?;
    if cfg.phase != Phase::Stage1 {
        bail!("train-stage1 needs phase stage1, the configuration says {}", cfg.phase.name());
    }
    resolve_extractor(&a.common, &mut cfg);
    let data = load_training_data(&a.common, &cfg)?;
    let resume = a.common.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    train_stage1(&cfg, &data, resume.as_ref(), Some(&a.common.out))?;
    Ok(())
}

fn cmd_train_umsn(a: TrainUmsn) -> Result<()> {
    let mut cfg = load_train_config(&a.common, Phase::Umsn, None)?;
    if cfg.phase != Phase::Umsn {
        bail!("train-umsn needs phase umsn, the configuration says {}", cfg.phase.name());
    }
    resolve_extractor(&a.common, &mut cfg);
    let data = load_training_data(&a.common, &cfg)?;
    let resume = a.common.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let mut init = UmsnInit {
        resume,
        ..UmsnInit::default()
    };
    if init.resume.is_none() && cfg.variant.network(cfg.width_multiplier).streams {
        let paths: Vec<PathBuf> = if a.stage1.is_empty() {
            cfg.stage1_checkpoints
                .iter()
                .map(|p| config_relative(&a.common.config, p))
                .collect()
        } else {
            a.stage1.clone()
        };
        for p in &paths {
            init.stage1
                .push(Checkpoint::load(p).and_then(|c| c.stage1()).with_context(|| format!("loading {}", p.display()))?);
        }
    }
    if cfg.masks == MaskMode::Snet {
        let p = match (&a.snet_checkpoint, &cfg.snet_checkpoint) {
            (Some(p), _) => p.clone(),
            (None, Some(p)) => config_relative(&a.common.config, p),
            (None, None) => bail!("mask mode snet needs --snet-checkpoint"),
        };
        init.snet = Some(Checkpoint::load(&p)?.snet()?);
    }
    train_umsn(&cfg, &data, init, Some(&a.common.out))?;
    Ok(())
}

fn load_snet(path: Option<&Path>) -> Result<SNetModel> {
    let p = path.ok_or_else(|| anyhow!("--masks snet needs --snet-checkpoint"))?;
    Ok(Checkpoint::load(p)?.snet()?)
}

fn deblur(a: DeblurArgs) -> Result<()> {
    let (model, _) = Checkpoint::load(&a.checkpoint)?.umsn()?;
    let blurry = Image::load_png(&a.input)?;
    let masks = if a.masks == "snet" {
        snet_forward(&load_snet(a.snet_checkpoint.as_deref())?, &blurry)?
    } else {
        SemanticMaskSet::load_png(Path::new(&a.masks))?
    };
    let out = umsn_forward(&model, &blurry, &masks)?.clamped();
    let parent = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
    let tmp = tempfile::Builder::new()
        .prefix(".umsn-")
        .suffix(".png")
        .tempfile_in(&parent)
        .with_context(|| format!("creating a temporary file in {}", parent.display()))?;
    out.save_png(tmp.path())?;
    tmp.persist(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<i32> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let fx = match &a.extractor {
        Some(p) => FeatureExtractor::load(p)?,
        None => FeatureExtractor::seeded(a.extractor_seed),
    };
    let (model, digest): (Box<dyn Deblur>, String) = match &a.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let digest = ck.meta.config_digest.clone();
            (Box::new(ck.umsn()?.0), digest)
        }
        None => (Box::new(Identity), String::new()),
    };
    let snet = match a.masks.as_str() {
        "stored" => None,
        "snet" => Some(load_snet(a.snet_checkpoint.as_deref())?),
        other => bail!("--masks must be \"stored\" or \"snet\", got {other:?}"),
    };
    let masks_from = match &snet {
        Some(s) => EvalMasks::Snet(s),
        None => EvalMasks::Stored,
    };
    let options = EvalOptions {
        config_digest: digest,
        grids: a.grids,
    };
    let report = evaluate_dataset(model.as_ref(), &manifest, masks_from, &fx, &options, Some(&a.out))?;
    for f in &report.failures {
        eprintln!("warning: sample {}: {}", f.id, f.message);
    }
    println!(
        "{} images: psnr {} ssim {:.4} d_feat {:.4}",
        report.records.len(),
        report
            .aggregate
            .psnr
            .map(|p| format!("{p:.3} dB"))
            .unwrap_or_else(|| "identical".into()),
        report.aggregate.ssim,
        report.aggregate.d_feat
    );
    Ok(report.exit_code())
}
