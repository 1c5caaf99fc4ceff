//! Command-line workflow: generate benchmark data, train models, run
//! (optionally adaptive) inference, evaluate predictions, and sweep
//! adaptation hyper-parameters.

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{AdaptMode, ConfigError, RunConfig};
use crate::eval::{self, Protocol};
use crate::geometry::{CameraModel, Pose2D, Pose3D, SkeletonTopology};
use crate::iso::{IsoConfig, IsoEngine, IsoError, IsoMode};
use crate::losses::SslKind;
use crate::nn::{HeadKind, LifterNetwork, NetMode};
use crate::synthdata::{self, DataError, Dataset, Record};
use crate::train::{self, TrainError};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Exit codes: 0 success, 2 config/usage, 3 IO or file-format, 4
/// incompatibility between artifacts.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_INCOMPATIBLE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Iso(#[from] IsoError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) | CliError::Train(TrainError::Config(_)) => {
                EXIT_CONFIG
            }
            CliError::Iso(IsoError::Config(_)) => EXIT_CONFIG,
            CliError::Iso(IsoError::Incompatible(_)) => EXIT_INCOMPATIBLE,
            CliError::Data(DataError::Incompatible(_)) => EXIT_INCOMPATIBLE,
            _ => EXIT_IO,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "iso-pose", about = "2D-to-3D pose lifting with inference-stage adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the source/target dataset pair described by a config file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Create missing output directories instead of failing.
        #[arg(long)]
        create: bool,
    },
    /// Train a model (baseline or joint, per the config's train.ssl).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the configured SSL kind (none|adversary|cycle).
        #[arg(long)]
        ssl: Option<String>,
        /// Checkpoint output path (default: <out.dir>/model.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict 3D poses for a dataset, optionally adapting per instance.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// off | vanilla | online
        #[arg(long, default_value = "off")]
        iso: String,
        /// Adaptation iterations per instance (default: 10 vanilla, 1 online).
        #[arg(long)]
        t: Option<usize>,
        /// Adaptation learning rate.
        #[arg(long, default_value_t = 2e-5)]
        alpha: f32,
        /// Adapt only every k-th instance.
        #[arg(long, default_value_t = 1)]
        skip: usize,
        /// Copies per adaptation mini-batch.
        #[arg(long, default_value_t = 32)]
        copies: usize,
        /// Adaptation objective (adversary|cycle).
        #[arg(long, default_value = "cycle")]
        ssl: String,
        /// Pixel-frame Gaussian noise added to the 2D inputs.
        #[arg(long, default_value_t = 0.0)]
        sigma: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Predictions file to write.
        #[arg(long)]
        out: PathBuf,
        /// Timing TSV to write (default: <out>.timing.tsv).
        #[arg(long)]
        timing: Option<PathBuf>,
    },
    /// Score a predictions file against its ground-truth dataset.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// us | gs | pa
        #[arg(long, default_value = "us")]
        protocol: String,
        /// Also emit per-part PCK and limb-ratio sections.
        #[arg(long)]
        full: bool,
        /// Report file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate PCK across a grid of adaptation hyper-parameter values.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// T | alpha
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long, default_value = "cycle")]
        ssl: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sweep table output; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn ensure_parent(path: &Path, create: bool) -> Result<(), CliError> {
    let Some(parent) = path.parent() else { return Ok(()) };
    if parent.as_os_str().is_empty() || parent.exists() {
        return Ok(());
    }
    if create {
        std::fs::create_dir_all(parent).map_err(io_err(parent))
    } else {
        Err(CliError::Usage(format!(
            "output directory {} does not exist (pass --create to make it)",
            parent.display()
        )))
    }
}

fn parse_ssl_flag(v: &str) -> Result<SslKind, CliError> {
    match v {
        "none" => Ok(SslKind::None),
        "adversary" => Ok(SslKind::Adversary),
        "cycle" => Ok(SslKind::Cycle),
        _ => Err(CliError::Usage(format!("unknown ssl kind '{}'", v))),
    }
}

fn parse_protocol_flag(v: &str) -> Result<Protocol, CliError> {
    match v {
        "us" => Ok(Protocol::Unscaled),
        "gs" => Ok(Protocol::GlobalScale),
        "pa" => Ok(Protocol::Procrustes),
        _ => Err(CliError::Usage(format!("unknown protocol '{}'", v))),
    }
}

pub fn cmd_gen_data(config_path: &Path, create: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(config_path)?;
    let topo = SkeletonTopology::default_16();
    let cam = CameraModel::default();
    let source = synthdata::desk_source(&topo, cfg.source_count, cfg.data_seed);
    let target = synthdata::desk_target(&topo, cfg.target_count, cfg.data_seed.wrapping_add(1));
    for (dist, path) in [(&source, &cfg.source_path), (&target, &cfg.target_path)] {
        let ds = synthdata::make_dataset(dist, &topo, &cam)?;
        ensure_parent(path, create)?;
        synthdata::write_dataset(path, &ds)?;
    }
    ensure_parent(&cfg.out_dir.join("manifest.txt"), true)?;
    write_file(&cfg.out_dir.join("manifest.txt"), &cfg.manifest())?;
    Ok(())
}

pub fn cmd_train(
    config_path: &Path,
    epochs: Option<usize>,
    ssl: Option<&str>,
    out: Option<&Path>,
) -> Result<PathBuf, CliError> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = ssl {
        cfg.train.ssl = parse_ssl_flag(s)?;
    }
    let ds = synthdata::read_dataset(&cfg.source_path)?;
    let outcome = if cfg.train.ssl == SslKind::None {
        train::train_baseline(&ds, &cfg.arch, &cfg.train)?
    } else {
        train::train_joint(&ds, &cfg.arch, &cfg.train)?
    };
    let ckpt_path = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join("model.ckpt"));
    ensure_parent(&ckpt_path, true)?;
    let meta = CheckpointMeta {
        epoch: cfg.train.epochs as u64,
        seed: cfg.train.seed,
        ssl: cfg.train.ssl,
    };
    checkpoint::save_checkpoint(&ckpt_path, &outcome.lifter, outcome.disc.as_ref(), &ds.topo, &meta)?;
    ensure_parent(&cfg.out_dir.join("x"), true)?;
    write_file(&cfg.out_dir.join("train_log.tsv"), &train::render_train_log(&outcome.report))?;
    write_file(&cfg.out_dir.join("manifest.txt"), &cfg.manifest())?;
    Ok(ckpt_path)
}

/// Flip-averaged prediction without adaptation, usable with any
/// checkpoint.
pub fn predict_plain(
    lifter: &mut LifterNetwork<f32>,
    topo: &SkeletonTopology,
    x: &Pose2D<f32>,
) -> Result<Pose3D<f32>, CliError> {
    let joints = lifter.config.joints;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let flipped = crate::geometry::hflip2d(x, topo);
    let mut tape = crate::autodiff::Tape::<f32>::new();
    let xn = tape.constant(1, 2 * joints, x.flatten());
    let (y1, _) = lifter
        .forward(&mut tape, xn, HeadKind::Fsl, NetMode::Eval, &mut rng)
        .map_err(TrainError::from)?;
    let fx = tape.constant(1, 2 * joints, flipped.flatten());
    let (y2, _) = lifter
        .forward(&mut tape, fx, HeadKind::Fsl, NetMode::Eval, &mut rng)
        .map_err(TrainError::from)?;
    let p1 = Pose3D::from_flat(tape.value(y1));
    let p2 = crate::geometry::hflip3d(&Pose3D::from_flat(tape.value(y2)), topo);
    Ok(Pose3D {
        joints: p1
            .joints
            .iter()
            .zip(&p2.joints)
            .map(|(a, b)| [(a[0] + b[0]) * 0.5, (a[1] + b[1]) * 0.5, (a[2] + b[2]) * 0.5])
            .collect(),
    })
}

/// Inputs after optional noise injection.
fn noisy_inputs(ds: &Dataset, sigma: f32, seed: u64) -> Result<Vec<Pose2D<f32>>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5161_6d61));
    let root = ds.topo.root();
    (0..ds.len())
        .map(|i| {
            synthdata::add_noise2d(&ds.pose2d(i), sigma, root, &mut rng)
                .map_err(|e| CliError::Data(DataError::Geometry(e)))
        })
        .collect()
}

/// Predictions are stored in the dataset container: 3D = prediction, 2D =
/// the (possibly noisy) input it was made from.
fn predictions_dataset(ds: &Dataset, xs: &[Pose2D<f32>], preds: &[Pose3D<f32>]) -> Dataset {
    Dataset {
        topo: ds.topo.clone(),
        cam: ds.cam,
        config: ds.config.clone(),
        records: xs
            .iter()
            .zip(preds)
            .map(|(x, p)| Record { pose3d: p.flatten(), pose2d: x.flatten() })
            .collect(),
    }
}

#[allow(clippy::too_many_arguments)]
pub struct InferArgs<'a> {
    pub checkpoint: &'a Path,
    pub dataset: &'a Path,
    pub iso: AdaptMode,
    pub t: Option<usize>,
    pub alpha: f32,
    pub skip: usize,
    pub copies: usize,
    pub ssl: SslKind,
    pub sigma: f32,
    pub seed: u64,
    pub out: &'a Path,
    pub timing: Option<&'a Path>,
}

pub fn cmd_infer(args: &InferArgs) -> Result<(), CliError> {
    let ds = synthdata::read_dataset(args.dataset)?;
    let ckpt = checkpoint::load_checkpoint(args.checkpoint)?;
    if ckpt.arch.joints != ds.joint_count() {
        return Err(CliError::Data(DataError::Incompatible(format!(
            "checkpoint expects {} joints, dataset has {}",
            ckpt.arch.joints,
            ds.joint_count()
        ))));
    }
    let xs = noisy_inputs(&ds, args.sigma, args.seed)?;
    let (preds, timings) = match args.iso {
        AdaptMode::Off => {
            let mut lifter = ckpt.lifter;
            let mut preds = Vec::with_capacity(xs.len());
            let mut timings = Vec::with_capacity(xs.len());
            for (i, x) in xs.iter().enumerate() {
                let start = std::time::Instant::now();
                preds.push(predict_plain(&mut lifter, &ds.topo, x)?);
                timings.push(crate::iso::InstanceTiming {
                    index: i,
                    adapted: false,
                    seconds: start.elapsed().as_secs_f64(),
                });
            }
            (preds, timings)
        }
        AdaptMode::Vanilla | AdaptMode::Online => {
            let mode =
                if args.iso == AdaptMode::Vanilla { IsoMode::Vanilla } else { IsoMode::Online };
            let base = if mode == IsoMode::Vanilla {
                IsoConfig::vanilla(args.ssl)
            } else {
                IsoConfig::online(args.ssl)
            };
            let config = IsoConfig {
                t: args.t.unwrap_or(base.t),
                alpha: args.alpha,
                skip: args.skip,
                copies: args.copies,
                seed: args.seed,
                ..base
            };
            let mut engine = IsoEngine::from_checkpoint(ckpt, config)?;
            engine.cam = ds.cam;
            engine.infer_sequence(&xs)?
        }
    };
    ensure_parent(args.out, true)?;
    synthdata::write_dataset(args.out, &predictions_dataset(&ds, &xs, &preds))?;
    let timing_path = args
        .timing
        .map(Path::to_path_buf)
        .unwrap_or_else(|| args.out.with_extension("timing.tsv"));
    write_file(&timing_path, &crate::iso::render_timing(&timings))?;
    write_file(&args.out.with_extension("manifest.txt"), &infer_manifest(args))?;
    Ok(())
}

/// Echo of the fully resolved inference settings, written next to the
/// predictions.
fn infer_manifest(args: &InferArgs) -> String {
    let mode = match args.iso {
        AdaptMode::Off => "off",
        AdaptMode::Vanilla => "vanilla",
        AdaptMode::Online => "online",
    };
    let default_t = if args.iso == AdaptMode::Online { 1 } else { 10 };
    format!(
        "infer.checkpoint = {}\ninfer.dataset = {}\ninfer.iso = {}\ninfer.t = {}\n\
         infer.alpha = {}\ninfer.skip = {}\ninfer.copies = {}\ninfer.ssl = {}\n\
         infer.sigma = {}\ninfer.seed = {}\n",
        args.checkpoint.display(),
        args.dataset.display(),
        mode,
        args.t.unwrap_or(default_t),
        args.alpha,
        args.skip,
        args.copies,
        match args.ssl {
            SslKind::None => "none",
            SslKind::Adversary => "adversary",
            SslKind::Cycle => "cycle",
        },
        args.sigma,
        args.seed,
    )
}

pub fn cmd_eval(
    predictions: &Path,
    dataset: &Path,
    protocol: Protocol,
    full: bool,
    out: Option<&Path>,
) -> Result<String, CliError> {
    let preds_ds = synthdata::read_dataset(predictions)?;
    let gt_ds = synthdata::read_dataset(dataset)?;
    if preds_ds.len() != gt_ds.len() || preds_ds.joint_count() != gt_ds.joint_count() {
        return Err(CliError::Data(DataError::Incompatible(format!(
            "{} predictions of {} joints vs {} ground truths of {} joints",
            preds_ds.len(),
            preds_ds.joint_count(),
            gt_ds.len(),
            gt_ds.joint_count()
        ))));
    }
    let preds: Vec<Pose3D<f32>> = (0..preds_ds.len()).map(|i| preds_ds.pose3d(i)).collect();
    let gts: Vec<Pose3D<f32>> = (0..gt_ds.len()).map(|i| gt_ds.pose3d(i)).collect();
    let report = eval::evaluate_protocol(&preds, &gts, &gt_ds.topo, protocol)?;
    let mut text = eval::render_report(&report);
    if full {
        let hists = eval::limb_ratio_report(&preds, &gt_ds.topo, 40, (0.525, 2.525))?;
        text.push('\n');
        text.push_str(&eval::render_ratio_report(&hists));
    }
    if let Some(path) = out {
        ensure_parent(path, true)?;
        write_file(path, &text)?;
        write_file(
            &path.with_extension("manifest.txt"),
            &format!(
                "eval.predictions = {}\neval.dataset = {}\neval.protocol = {}\neval.full = {}\n",
                predictions.display(),
                dataset.display(),
                protocol.tag(),
                full
            ),
        )?;
    }
    Ok(text)
}

pub fn cmd_sweep(
    checkpoint_path: &Path,
    dataset: &Path,
    param: &str,
    values: &str,
    ssl: SslKind,
    seed: u64,
    out: Option<&Path>,
) -> Result<String, CliError> {
    if param != "T" && param != "alpha" {
        return Err(CliError::Usage(format!("unknown sweep parameter '{}' (use T or alpha)", param)));
    }
    let parsed: Vec<f64> = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad sweep value '{}'", v)))
        })
        .collect::<Result<_, _>>()?;
    if parsed.is_empty() {
        return Err(CliError::Usage("no sweep values given".into()));
    }
    let ds = synthdata::read_dataset(dataset)?;
    let gts: Vec<Pose3D<f32>> = (0..ds.len()).map(|i| ds.pose3d(i)).collect();
    let xs: Vec<Pose2D<f32>> = (0..ds.len()).map(|i| ds.pose2d(i)).collect();
    let mut table = String::from("param\tvalue\tmode\tPCK\tAUC\tMPJPE\n");
    for &value in &parsed {
        for mode in [IsoMode::Vanilla, IsoMode::Online] {
            let base = match mode {
                IsoMode::Vanilla => IsoConfig::vanilla(ssl),
                IsoMode::Online => IsoConfig::online(ssl),
            };
            let config = match param {
                "T" => IsoConfig { t: value as usize, seed, ..base },
                _ => IsoConfig { alpha: value as f32, seed, ..base },
            };
            let ckpt = checkpoint::load_checkpoint(checkpoint_path)?;
            let mut engine = IsoEngine::from_checkpoint(ckpt, config)?;
            engine.cam = ds.cam;
            let (preds, _) = engine.infer_sequence(&xs)?;
            let report = eval::evaluate_protocol(&preds, &gts, &ds.topo, Protocol::Unscaled)?;
            let tag = if mode == IsoMode::Vanilla { "vanilla" } else { "online" };
            table.push_str(&format!(
                "{}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}\n",
                param, value, tag, report.pck, report.auc, report.mpjpe
            ));
        }
    }
    if let Some(path) = out {
        ensure_parent(path, true)?;
        write_file(path, &table)?;
        write_file(
            &path.with_extension("manifest.txt"),
            &format!(
                "sweep.checkpoint = {}\nsweep.dataset = {}\nsweep.param = {}\n\
                 sweep.values = {}\nsweep.ssl = {}\nsweep.seed = {}\n",
                checkpoint_path.display(),
                dataset.display(),
                param,
                values,
                match ssl {
                    SslKind::None => "none",
                    SslKind::Adversary => "adversary",
                    SslKind::Cycle => "cycle",
                },
                seed
            ),
        )?;
    }
    Ok(table)
}

/// Dispatch a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result: Result<(), CliError> = (|| match cli.command {
        Command::GenData { config, create } => cmd_gen_data(&config, create),
        Command::Train { config, epochs, ssl, out } => {
            cmd_train(&config, epochs, ssl.as_deref(), out.as_deref()).map(|_| ())
        }
        Command::Infer {
            checkpoint,
            dataset,
            iso,
            t,
            alpha,
            skip,
            copies,
            ssl,
            sigma,
            seed,
            out,
            timing,
        } => {
            let mode = AdaptMode::parse(&iso)
                .ok_or_else(|| CliError::Usage(format!("unknown iso mode '{}'", iso)))?;
            cmd_infer(&InferArgs {
                checkpoint: &checkpoint,
                dataset: &dataset,
                iso: mode,
                t,
                alpha,
                skip,
                copies,
                ssl: parse_ssl_flag(&ssl)?,
                sigma,
                seed,
                out: &out,
                timing: timing.as_deref(),
            })
        }
        Command::Eval { predictions, dataset, protocol, full, out } => {
            let text = cmd_eval(
                &predictions,
                &dataset,
                parse_protocol_flag(&protocol)?,
                full,
                out.as_deref(),
            )?;
            if out.is_none() {
                print!("{}", text);
            }
            Ok(())
        }
        Command::Sweep { checkpoint, dataset, param, values, ssl, seed, out } => {
            let text = cmd_sweep(
                &checkpoint,
                &dataset,
                &param,
                &values,
                parse_ssl_flag(&ssl)?,
                seed,
                out.as_deref(),
            )?;
            if out.is_none() {
                print!("{}", text);
            }
            Ok(())
        }
    })();
    match result {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error: {}", e);
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {}", s);
                src = s.source();
            }
            code
        }
    }
}
