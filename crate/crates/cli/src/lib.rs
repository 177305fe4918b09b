//! The `shapeprior` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or parse
//! error, 3 numeric failure during training.

mod config;
mod table;

use std::ffi::OsString;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use shapeprior_core::checkpoint;
use shapeprior_core::data::{
    normalize, parse_cloud, resample, synth_dataset, write_cloud, write_dataset, CloudFormat,
    Dataset, Manifest, Primitive, SynthConfig,
};
use shapeprior_core::network::complete;
use shapeprior_core::pointops::PointCloud;
use shapeprior_core::training::{
    evaluate, score, Ablation, Metric, MetricTable, Session, StepLog, TrainConfig,
};
use shapeprior_core::Error as CoreError;

pub use table::{csv, render, scaled};

/// A problem with the command line or configuration.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser, Debug)]
#[command(name = "shapeprior", version, about = "Point cloud completion with learned shape priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of primitives with view-cropped partials.
    SynthData(SynthArgs),
    /// Pretrain the auto-encoder on complete clouds.
    TrainAe(TrainAeArgs),
    /// Train the completion network from a pretrained auto-encoder.
    Train(TrainArgs),
    /// Tabulate a metric for a checkpoint or a directory of predictions.
    Eval(EvalArgs),
    /// Complete one cloud, or every partial cloud of a manifest.
    Complete(CompleteArgs),
    /// Score a directory of predictions against ground truth.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory; receives partial/, complete/ and manifest.tsv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Comma-separated shapes: sphere, box, cylinder, torus.
    #[arg(long, default_value = "sphere,box")]
    shapes: String,
    #[arg(long, default_value_t = 256)]
    n_partial: usize,
    #[arg(long, default_value_t = 1024)]
    n_complete: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// xyz-text or xyz-binary.
    #[arg(long, default_value = "xyz-text")]
    format: String,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Where the final checkpoint is written.
    #[arg(long)]
    out: PathBuf,
    /// toy, paper or tiny; ignored when resuming.
    #[arg(long, default_value = "toy")]
    preset: String,
    /// key = value file applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value overrides, applied after the config file.
    #[arg(long = "set")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<u64>,
    /// Stop after this many generator updates in total.
    #[arg(long)]
    iterations: Option<u64>,
    /// Resample every partial cloud to this many points.
    #[arg(long)]
    n_partial: Option<usize>,
    /// Resample every complete cloud to this many points.
    #[arg(long)]
    n_complete: Option<usize>,
    /// Append one line of scalars per step to this file.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue the run stored in this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also save to --out every this many steps.
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainAeArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Pretrained auto-encoder checkpoint.
    #[arg(long)]
    ae_checkpoint: Option<PathBuf>,
    /// baseline, l2, ls, mmd or l2+mmd.
    #[arg(long)]
    ablation: Option<String>,
    /// Keep the reloaded decoder fixed.
    #[arg(long)]
    freeze_decoder: bool,
    #[arg(long)]
    d_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Model to evaluate.
    #[arg(long, conflicts_with = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Directory of predicted clouds named like the manifest's partial files.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// cd-t, cd-p or fidelity.
    #[arg(long, default_value = "cd-t")]
    variant: String,
    /// Output resolutions; defaults to the checkpoint's.
    #[arg(long)]
    resolution: Vec<usize>,
    /// all, train or val (split by the checkpoint's seed).
    #[arg(long, default_value = "all")]
    split: String,
    #[arg(long)]
    n_partial: Option<usize>,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Write the table as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of predicted clouds named like the manifest's partial files.
    #[arg(long)]
    outputs: PathBuf,
    #[arg(long, default_value = "cd-t")]
    variant: String,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompleteArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A partial cloud; the output is written to --out.
    #[arg(long, conflicts_with = "manifest")]
    input: Option<PathBuf>,
    /// Complete every partial cloud of a manifest into the --out directory.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output file (with --input) or directory (with --manifest).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resolution: Option<usize>,
    /// Fit the input into the unit box first and map the output back.
    #[arg(long)]
    normalize: bool,
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// 1 for usage and configuration problems, 3 for numeric failures, 2 for
/// everything touching data.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            return match core {
                CoreError::Config(_) => 1,
                CoreError::Numeric(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::SynthData(a) => synth_data(a),
        Command::TrainAe(a) => train_ae(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Complete(a) => complete_cmd(a),
        Command::Metrics(a) => metrics(a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

fn flag<V, E: fmt::Display>(name: &str, r: std::result::Result<V, E>) -> Result<V> {
    r.map_err(|e| usage(format!("{name}: {e}")))
}

fn seed_or_env(seed: Option<u64>) -> Result<Option<u64>> {
    Ok(match seed {
        Some(s) => Some(s),
        None => config::env_seed()?,
    })
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let shapes = a
        .shapes
        .split(',')
        .map(|s| s.trim().parse::<Primitive>())
        .collect::<std::result::Result<Vec<_>, _>>();
    let cfg = SynthConfig {
        shapes: flag("--shapes", shapes)?,
        count: a.count,
        n_partial: a.n_partial,
        n_complete: a.n_complete,
        seed: seed_or_env(a.seed)?.unwrap_or(0),
    };
    flag("synth-data", cfg.validate())?;
    let format: CloudFormat = flag("--format", a.format.parse())?;
    let data = synth_dataset(&cfg)?;
    let manifest = write_dataset(&a.out, &data, format)?;
    println!("wrote {} samples, manifest {}", data.len(), manifest.display());
    Ok(())
}

/// Preset, then config file, then `--set`, then dedicated flags. The seed
/// falls back to `PCSP_SEED` when no layer sets it.
fn resolve(base: TrainConfig, run: &RunArgs) -> Result<TrainConfig> {
    let mut cfg = base;
    let mut seed_set = false;
    if let Some(path) = &run.config {
        let pairs = config::read_pairs(path).map_err(|e| usage(format!("--config: {e:#}")))?;
        seed_set |= pairs.iter().any(|(k, _)| k == "seed");
        config::apply(&mut cfg, &pairs, &path.display().to_string())?;
    }
    let sets = run
        .set
        .iter()
        .map(|s| config::parse_set(s))
        .collect::<Result<Vec<_>>>()?;
    seed_set |= sets.iter().any(|(k, _)| k == "seed");
    config::apply(&mut cfg, &sets, "--set")?;
    match run.seed {
        Some(s) => cfg.seed = s,
        None if !seed_set => {
            if let Some(s) = config::env_seed()? {
                cfg.seed = s;
            }
        }
        None => {}
    }
    if let Some(v) = run.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = run.lr {
        cfg.lr0 = v;
    }
    if let Some(v) = run.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = run.iterations {
        cfg.max_iters = Some(v);
    }
    Ok(cfg)
}

fn validated(cfg: TrainConfig) -> Result<TrainConfig> {
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn load_manifest(path: &Path, n_partial: Option<usize>, n_complete: Option<usize>, seed: u64) -> Result<Dataset> {
    let manifest = Manifest::read(path).with_context(|| format!("--manifest {}", path.display()))?;
    checked(path, manifest.load(n_partial, n_complete, seed))
}

/// Ground truth as stored, for scoring predictions made outside this tool.
fn load_manifest_raw(path: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(path).with_context(|| format!("--manifest {}", path.display()))?;
    checked(path, manifest.load_raw())
}

fn checked(path: &Path, data: shapeprior_core::Result<Dataset>) -> Result<Dataset> {
    let data = data
        .with_context(|| format!("loading clouds listed in {}", path.display()))?;
    if data.is_empty() {
        return Err(anyhow!(CoreError::EmptyInput("manifest"))
            .context(format!("--manifest {} lists no samples", path.display())));
    }
    Ok(data)
}

fn load_checkpoint(flag_name: &str, path: &Path) -> Result<Session<f32>> {
    checkpoint::load(path).with_context(|| format!("{flag_name} {}", path.display()))
}

fn train_ae(a: TrainAeArgs) -> Result<()> {
    let session = match &a.run.resume {
        Some(path) => {
            let mut s = load_checkpoint("--resume", path)?;
            s.cfg = validated(resolve(s.cfg.clone(), &a.run)?)?;
            s
        }
        None => {
            let cfg = validated(resolve(config::preset(&a.run.preset)?, &a.run)?)?;
            Session::autoencoder(cfg)?
        }
    };
    run_session(session, &a.run)
}

fn train(a: TrainArgs) -> Result<()> {
    let session = match &a.run.resume {
        Some(path) => {
            let mut s = load_checkpoint("--resume", path)?;
            s.cfg = validated(apply_train_flags(resolve(s.cfg.clone(), &a.run)?, &a)?)?;
            s
        }
        None => {
            let ae_path = a
                .ae_checkpoint
                .as_ref()
                .ok_or_else(|| usage("train requires --ae-checkpoint"))?;
            if a.ablation.is_none() {
                bail!(usage("train requires --ablation (baseline, l2, ls, mmd or l2+mmd)"));
            }
            let ae = load_checkpoint("--ae-checkpoint", ae_path)?;
            // the network comes from the pretrained run
            let mut base = ae.cfg.clone();
            base.max_iters = None;
            let cfg = validated(apply_train_flags(resolve(base, &a.run)?, &a)?)?;
            Session::completion(cfg, &ae).with_context(|| format!("--ae-checkpoint {}", ae_path.display()))?
        }
    };
    run_session(session, &a.run)
}

fn apply_train_flags(mut cfg: TrainConfig, a: &TrainArgs) -> Result<TrainConfig> {
    if let Some(v) = &a.ablation {
        cfg.ablation = flag::<Ablation, _>("--ablation", v.parse())?;
    }
    if a.freeze_decoder {
        cfg.freeze_decoder = true;
    }
    if let Some(v) = a.d_steps {
        cfg.d_steps_per_g = v;
    }
    Ok(cfg)
}

fn run_session(mut session: Session<f32>, run: &RunArgs) -> Result<()> {
    let cfg = session.cfg.clone();
    let data = load_manifest(&run.manifest, run.n_partial, run.n_complete, cfg.seed)?;
    let (train_set, val_set) = data.split(cfg.val_fraction, cfg.seed);
    if train_set.len() < cfg.batch_size {
        bail!(usage(format!(
            "batch_size = {} exceeds the {} training samples",
            cfg.batch_size,
            train_set.len()
        )));
    }
    let mut log = match &run.log {
        Some(p) => Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| CoreError::Io { path: p.clone(), source: e })?,
        ),
        None => None,
    };
    let every = run.checkpoint_every.unwrap_or(0);
    let out = run.out.clone();
    let budget = cfg.max_iters.map_or(u64::MAX, |m| m.saturating_sub(session.iteration));
    let pending = std::cell::Cell::new(false);
    let mut on_step = |s: &StepLog| -> Result<(), CoreError> {
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", s.line()).map_err(|e| CoreError::Io {
                path: run.log.clone().unwrap_or_default(),
                source: e,
            })?;
        }
        if (s.iteration + 1) % 100 == 0 {
            eprintln!("{}", s.line());
        }
        if every > 0 && (s.iteration + 1) % every == 0 {
            pending.set(true);
        }
        Ok(())
    };
    // step in chunks so periodic checkpoints see a consistent session
    let chunk = if every > 0 { every } else { budget };
    let mut left = budget;
    while left > 0 && !session.finished() {
        let n = chunk.min(left);
        let before = session.iteration;
        session
            .run(&train_set, n, &mut on_step)
            .with_context(|| format!("{} training", session.stage.name()))?;
        left -= session.iteration - before;
        if pending.replace(false) {
            checkpoint::save(&out, &session)?;
        }
        if session.iteration == before {
            break;
        }
    }
    checkpoint::save(&out, &session)?;
    println!(
        "{} stage: {} iterations, epoch {}, checkpoint {}",
        session.stage.name(),
        session.iteration,
        session.epoch,
        out.display()
    );
    if !val_set.is_empty() {
        let metric = Metric::Chamfer(cfg.loss_variant);
        let t = evaluate(&session.params, &cfg.net, &val_set, metric, cfg.net.fine_count, cfg.batch_size)?;
        println!("validation {metric} x10^-3: {}", scaled(t.average));
    }
    Ok(())
}

fn parse_metric(v: &str) -> Result<Metric> {
    flag("--variant", v.parse::<Metric>())
}

fn emit(tables: &[MetricTable], csv_path: Option<&Path>) -> Result<()> {
    print!("{}", render(tables));
    if let Some(p) = csv_path {
        fs::write(p, csv(tables)).map_err(|e| CoreError::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

/// Predicted clouds for each record, found by the partial file's name.
fn read_predictions(manifest: &Path, dir: &Path) -> Result<Vec<PointCloud>> {
    let m = Manifest::read(manifest).with_context(|| format!("--manifest {}", manifest.display()))?;
    m.records
        .iter()
        .map(|r| {
            let name = r
                .partial
                .file_name()
                .ok_or_else(|| usage(format!("record {} has no file name", r.partial.display())))?;
            let p = dir.join(name);
            parse_cloud(&p, CloudFormat::from_path(&p)).with_context(|| format!("prediction {}", p.display()))
        })
        .collect()
}

fn eval(a: EvalArgs) -> Result<()> {
    let metric = parse_metric(&a.variant)?;
    if let Some(dir) = &a.predictions {
        let data = load_manifest_raw(&a.manifest)?;
        let preds = read_predictions(&a.manifest, dir)?;
        let resolution = a.resolution.first().copied().unwrap_or_else(|| preds[0].len());
        let t = MetricTable::new(metric, resolution, score(&preds, &data, metric)?)?;
        return emit(&[t], a.csv.as_deref());
    }
    let path = a
        .checkpoint
        .as_ref()
        .ok_or_else(|| usage("eval needs --checkpoint or --predictions"))?;
    let session = load_checkpoint("--checkpoint", path)?;
    let cfg = &session.cfg;
    let data = load_manifest(&a.manifest, a.n_partial, None, cfg.seed)?;
    let (train_set, val_set) = data.split(cfg.val_fraction, cfg.seed);
    let data = match a.split.as_str() {
        "all" => data,
        "train" => train_set,
        "val" => val_set,
        other => bail!(usage(format!("--split: unknown split {other:?} (expected all, train or val)"))),
    };
    if data.is_empty() {
        bail!(usage(format!("--split {} selects no samples", a.split)));
    }
    let resolutions = if a.resolution.is_empty() {
        vec![cfg.net.fine_count]
    } else {
        a.resolution.clone()
    };
    let mut tables = Vec::new();
    for r in resolutions {
        cfg.net
            .with_resolution(r)
            .map_err(|e| usage(format!("--resolution {r}: {e}")))?;
        tables.push(evaluate(&session.params, &cfg.net, &data, metric, r, a.batch_size)?);
    }
    emit(&tables, a.csv.as_deref())
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let metric = parse_metric(&a.variant)?;
    let data = load_manifest_raw(&a.manifest)?;
    let preds = read_predictions(&a.manifest, &a.outputs)?;
    let t = MetricTable::new(metric, preds[0].len(), score(&preds, &data, metric)?)?;
    emit(&[t], a.csv.as_deref())
}

fn complete_cmd(a: CompleteArgs) -> Result<()> {
    let session = load_checkpoint("--checkpoint", &a.checkpoint)?;
    let mut net = session.cfg.net.clone();
    if let Some(r) = a.resolution {
        net = net
            .with_resolution(r)
            .map_err(|e| usage(format!("--resolution {r}: {e}")))?;
    }
    let run_one = |cloud: &PointCloud| -> Result<PointCloud> {
        let (input, transform) = if a.normalize {
            let (c, t) = normalize(cloud)?;
            (c, Some(t))
        } else {
            (cloud.clone(), None)
        };
        // the mirrored input must hold enough points for its FPS stage
        let need = net.mirror_sample.div_ceil(2);
        let input = if input.len() < need {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(session.cfg.seed);
            resample(&input, need, &mut rng)?
        } else {
            input
        };
        let (_, fine) = complete(&session.params, &net, &[&input])?.remove(0);
        Ok(match transform {
            Some(t) => t.invert(&fine),
            None => fine,
        })
    };
    match (&a.input, &a.manifest) {
        (Some(input), None) => {
            let cloud = parse_cloud(input, CloudFormat::from_path(input))
                .with_context(|| format!("--input {}", input.display()))?;
            let out = run_one(&cloud)?;
            write_cloud(&a.out, &out, CloudFormat::from_path(&a.out))?;
            println!("wrote {} points to {}", out.len(), a.out.display());
        }
        (None, Some(manifest)) => {
            let m = Manifest::read(manifest).with_context(|| format!("--manifest {}", manifest.display()))?;
            fs::create_dir_all(&a.out).map_err(|e| CoreError::Io {
                path: a.out.clone(),
                source: e,
            })?;
            for r in &m.records {
                let src = m.root.join(&r.partial);
                let cloud = parse_cloud(&src, CloudFormat::from_path(&src))
                    .with_context(|| format!("partial cloud {}", src.display()))?;
                let out = run_one(&cloud)?;
                let name = r.partial.file_name().ok_or_else(|| usage("record without a file name"))?;
                let dst = a.out.join(name);
                write_cloud(&dst, &out, CloudFormat::from_path(&dst))?;
            }
            println!("completed {} clouds into {}", m.records.len(), a.out.display());
        }
        _ => bail!(usage("complete needs exactly one of --input or --manifest")),
    }
    Ok(())
}
