//! Batch commands over synthetic mirror datasets: generation, teacher
//! training, distillation, evaluation, mask visualization and gradient
//! checks.
//!
//! Every command writes its fully resolved configuration as `config.json`
//! into its output directory. Diagnostics go to standard error; machine
//! output goes to files and standard output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use reflectdepth::io::{read_json, write_json, write_pfm, write_pgm};
use reflectdepth::metrics::mask_iou;
use reflectdepth::report::{evaluate, EvalReport};
use reflectdepth::selfcheck::{check_seed, ObjectiveCheck, CHECK_TOLERANCE};
use reflectdepth::synthscene::{generate_sequence, Dataset, Preset, SceneSpec};
use reflectdepth::trainer::{train, train_student, Checkpoint, LogRecord, LossMode, MaskMode, Objective, TrainConfig};

pub const THREADS_ENV: &str = "REFLECTDEPTH_THREADS";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const DISTILL_LOG: &str = "distill_log.jsonl";

#[derive(Debug, Parser)]
#[command(name = "reflectdepth", version, about = "Reflection-aware depth optimization on synthetic mirror scenes")]
pub struct Cli {
    /// Worker threads; results are identical for any count.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic sequence with ground truth.
    Gen(GenArgs),
    /// Train per-frame depth grids in photo or triplet mode.
    Train(TrainArgs),
    /// Train a student on depths fused from two teachers.
    Distill(DistillArgs),
    /// Score a checkpoint against a dataset's ground truth.
    Eval(EvalArgs),
    /// Write the reflective mask of one frame pair as a PGM.
    Maskmap(MaskmapArgs),
    /// Compare analytic and numeric gradients of the training objectives.
    Gradcheck(GradcheckArgs),
    /// Write a checkpoint holding a dataset's ground-truth depths.
    GtCheckpoint(GtCheckpointArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Named scene.
    #[arg(long, conflicts_with = "spec")]
    pub preset: Option<Preset>,
    /// Scene description as JSON.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Override the mirror's virtual-image offset, in meters.
    #[arg(long, allow_negative_numbers = true)]
    pub virtual_offset: Option<f64>,
    /// Override the texture seed.
    #[arg(long)]
    pub texture_seed: Option<u64>,
    /// Number of frames; defaults to the preset's count or the whole
    /// trajectory.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Margin of the reflective mask: the quartile rule or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaArg {
    Adaptive,
    Fixed(f64),
}

impl FromStr for DeltaArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("adaptive") {
            return Ok(DeltaArg::Adaptive);
        }
        match s.parse::<f64>() {
            Ok(v) if v >= 0.0 && v.is_finite() => Ok(DeltaArg::Fixed(v)),
            _ => Err(format!("expected 'adaptive' or a margin >= 0, got '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Photo,
    Triplet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskModeArg {
    Zero,
    One,
    Auto,
}

impl From<MaskModeArg> for MaskMode {
    fn from(m: MaskModeArg) -> Self {
        match m {
            MaskModeArg::Zero => MaskMode::Zero,
            MaskModeArg::One => MaskMode::One,
            MaskModeArg::Auto => MaskMode::Auto,
        }
    }
}

/// Training settings shared by `train` and `distill`; flags override the
/// JSON file given with `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Training configuration as JSON; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mask_mode: Option<MaskModeArg>,
    /// `adaptive` or a fixed margin.
    #[arg(long)]
    pub delta: Option<DeltaArg>,
    /// Keep the masks of this iteration for the rest of training.
    #[arg(long)]
    pub freeze_mask_after: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub smoothness_weight: Option<f64>,
    #[arg(long)]
    pub init_depth: Option<f64>,
    #[arg(long)]
    pub init_jitter: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Apply the auto-mask (`true`/`false`).
    #[arg(long)]
    pub auto_mask: Option<bool>,
}

impl ConfigArgs {
    pub fn resolve(&self, base: TrainConfig) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => read_json::<TrainConfig>(p)?,
            None => base,
        };
        if let Some(m) = self.mask_mode {
            cfg.mask_mode = m.into();
        }
        match self.delta {
            Some(DeltaArg::Adaptive) => cfg.fixed_delta = None,
            Some(DeltaArg::Fixed(d)) => cfg.fixed_delta = Some(d),
            None => {}
        }
        if self.freeze_mask_after.is_some() {
            cfg.freeze_mask_after = self.freeze_mask_after;
        }
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        set!(iterations, learning_rate, smoothness_weight, init_depth, init_jitter, seed, auto_mask);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Photometric teacher, trusted outside reflective pixels.
    #[arg(long)]
    pub teacher_a: PathBuf,
    /// Triplet teacher, trusted on reflective pixels.
    #[arg(long)]
    pub teacher_b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write each pair's pseudo depth and mask under `pseudo/`.
    #[arg(long)]
    pub dump_pseudo: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Metrics destination; defaults to `eval.json` in the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mask_mode: Option<MaskModeArg>,
    #[arg(long)]
    pub delta: Option<DeltaArg>,
}

#[derive(Debug, Args)]
pub struct MaskmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Index into the ordered (reference, source) pairs.
    #[arg(long, default_value_t = 0)]
    pub pair: usize,
    /// Output PGM.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub delta: Option<DeltaArg>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    /// Corrupt every analytic gradient; the check must then fail.
    #[arg(long, hide = true)]
    pub negative_control: bool,
}

#[derive(Debug, Args)]
pub struct GtCheckpointArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Outcome of a command run through [`run`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// The command ran but its postcondition did not hold.
    Failed,
}

pub fn init_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            bail!("--threads must be >= 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<Outcome> {
    init_threads(cli.threads)?;
    match cli.command {
        Command::Gen(a) => cmd_gen(&a).and_then(|p| Ok(writeln!(std::io::stdout().lock(), "{}", p.display())?)),
        Command::Train(a) => cmd_train(&a).map(drop),
        Command::Distill(a) => cmd_distill(&a).map(drop),
        Command::Eval(a) => cmd_eval(&a).and_then(|r| print_json(&r)),
        Command::Maskmap(a) => cmd_maskmap(&a).and_then(|r| print_json(&r)),
        Command::Gradcheck(a) => return report_gradcheck(&cmd_gradcheck(&a)?),
        Command::GtCheckpoint(a) => cmd_gt_checkpoint(&a),
    }
    .map(|()| Outcome::Success)
}

fn report_gradcheck(checks: &[ObjectiveCheck]) -> Result<Outcome> {
    let mut out = std::io::stdout().lock();
    for c in checks {
        serde_json::to_writer(&mut out, c)?;
        writeln!(out)?;
    }
    drop(out);
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    for c in &failed {
        eprintln!(
            "gradcheck failed: seed {} {}: relative error {:.3e} at frame {} pixel {} (analytic {:.6e}, numeric {:.6e})",
            c.seed,
            c.objective.name(),
            c.max_rel_error,
            c.worst_frame,
            c.worst_pixel,
            c.analytic,
            c.numeric
        );
    }
    if !failed.is_empty() {
        return Ok(Outcome::Failed);
    }
    eprintln!("gradcheck: {} checks passed (tolerance {CHECK_TOLERANCE:e})", checks.len());
    Ok(Outcome::Success)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn write_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in log {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn progress(label: &'static str, total: usize) -> impl FnMut(&LogRecord) {
    let every = (total / 10).max(1);
    move |r: &LogRecord| {
        if r.iteration.is_multiple_of(every) || r.iteration + 1 == total {
            log::info!(
                "{label} {}/{total}: loss {:.6} delta {:?} reflective {:.3}",
                r.iteration + 1,
                r.loss,
                r.delta,
                r.reflective_fraction
            );
        }
    }
}

/// Evaluates when ground truth exists; otherwise warns and returns `None`.
fn evaluate_if_possible(
    ds: &Dataset,
    depths: &[reflectdepth::Tensor],
    cfg: &TrainConfig,
) -> Result<Option<EvalReport>> {
    if ds.frames[0].gt_depth.is_none() {
        log::warn!("dataset has no ground-truth depth; skipping metrics");
        return Ok(None);
    }
    if ds.frames[0].gt_reflective.is_none() {
        log::warn!("dataset has no ground-truth mirror mask; reporting global metrics only");
    }
    Ok(Some(evaluate(ds, depths, cfg)?))
}

#[derive(Debug, Serialize)]
struct GenConfig<'a> {
    command: &'static str,
    preset: Option<Preset>,
    frames: usize,
    scene: &'a SceneSpec,
}

pub fn cmd_gen(a: &GenArgs) -> Result<PathBuf> {
    let (mut spec, default_frames) = match (&a.preset, &a.spec) {
        (Some(p), None) => (p.spec(), p.frames()),
        (None, Some(path)) => {
            let spec: SceneSpec = read_json(path)?;
            let n = spec.trajectory.len();
            (spec, n)
        }
        _ => bail!("give exactly one of --preset or --spec"),
    };
    if let Some(d) = a.virtual_offset {
        spec.virtual_offset = d;
    }
    if let Some(s) = a.texture_seed {
        spec.texture_seed = s;
    }
    let frames = a.frames.unwrap_or(default_frames);
    spec.validate()?;
    let manifest = generate_sequence(&spec, frames, &a.out)?;
    write_json(&a.out.join(CONFIG_FILE), &GenConfig { command: "gen", preset: a.preset, frames, scene: &spec })?;
    if spec.no_violation() {
        log::info!("scene has no photometric violation: mirror pixels move like the plane");
    }
    Ok(manifest)
}

#[derive(Debug, Serialize)]
struct RunConfig<'a> {
    command: &'static str,
    data: &'a Path,
    #[serde(skip_serializing_if = "Option::is_none")]
    teacher_a: Option<&'a Path>,
    #[serde(skip_serializing_if = "Option::is_none")]
    teacher_b: Option<&'a Path>,
    train: &'a TrainConfig,
}

/// Result of `train` or `distill`.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    pub report: Option<EvalReport>,
}

pub fn cmd_train(a: &TrainArgs) -> Result<RunOutput> {
    let ds = load_dataset(&a.data)?;
    let mut cfg = a.cfg.resolve(TrainConfig::default())?;
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::Photo => LossMode::Photo,
            ModeArg::Triplet => LossMode::Triplet,
        };
    }
    if cfg.mode == LossMode::Distill {
        bail!("distill mode is run with the distill command");
    }
    create_dir(&a.out)?;
    write_json(
        &a.out.join(CONFIG_FILE),
        &RunConfig { command: "train", data: &a.data, teacher_a: None, teacher_b: None, train: &cfg },
    )?;
    let start = Instant::now();
    let trained = train(&ds, &cfg, progress("train", cfg.iterations))?;
    log::info!("trained {} iterations in {:.1}s", cfg.iterations, start.elapsed().as_secs_f64());
    let checkpoint = Checkpoint { models: trained.models.clone(), config: Some(cfg.clone()) };
    checkpoint.save(&a.out)?;
    write_log(&a.out.join(TRAIN_LOG), &trained.log)?;
    let report = evaluate_if_possible(&ds, &trained.depths(), &cfg)?;
    if let Some(r) = &report {
        write_json(&a.out.join(METRICS_FILE), r)?;
    }
    Ok(RunOutput { checkpoint, log: trained.log, report })
}

pub fn cmd_distill(a: &DistillArgs) -> Result<RunOutput> {
    let ds = load_dataset(&a.data)?;
    let load = |p: &Path| Checkpoint::load_depths(p).with_context(|| format!("loading teacher {}", p.display()));
    let (teacher_a, teacher_b) = (load(&a.teacher_a)?, load(&a.teacher_b)?);
    let mut cfg = a.cfg.resolve(TrainConfig::default())?;
    cfg.mode = LossMode::Distill;
    create_dir(&a.out)?;
    write_json(
        &a.out.join(CONFIG_FILE),
        &RunConfig {
            command: "distill",
            data: &a.data,
            teacher_a: Some(&a.teacher_a),
            teacher_b: Some(&a.teacher_b),
            train: &cfg,
        },
    )?;
    let start = Instant::now();
    let (trained, targets) = train_student(&ds, &teacher_a, &teacher_b, &cfg, progress("distill", cfg.iterations))?;
    log::info!("distilled {} iterations in {:.1}s", cfg.iterations, start.elapsed().as_secs_f64());
    if a.dump_pseudo {
        let dir = a.out.join("pseudo");
        create_dir(&dir)?;
        for t in &targets {
            write_pfm(&dir.join(format!("pseudo_r{:02}_s{:02}.pfm", t.reference, t.source)), &t.depth)?;
            write_pgm(&dir.join(format!("mask_r{:02}_s{:02}.pgm", t.reference, t.source)), &t.mask.mask)?;
        }
    }
    let checkpoint = Checkpoint { models: trained.models.clone(), config: Some(cfg.clone()) };
    checkpoint.save(&a.out)?;
    write_log(&a.out.join(DISTILL_LOG), &trained.log)?;
    let report = evaluate_if_possible(&ds, &trained.depths(), &cfg)?;
    if let Some(r) = &report {
        write_json(&a.out.join(METRICS_FILE), r)?;
    }
    Ok(RunOutput { checkpoint, log: trained.log, report })
}

/// Mask settings for scoring: the checkpoint's own training config when
/// present, with flag overrides.
fn mask_config(checkpoint: &Path, mask_mode: Option<MaskModeArg>, delta: Option<DeltaArg>) -> Result<TrainConfig> {
    let mut cfg = Checkpoint::load(checkpoint)?.config.unwrap_or_default();
    cfg.mode = LossMode::Triplet;
    if let Some(m) = mask_mode {
        cfg.mask_mode = m.into();
    }
    match delta {
        Some(DeltaArg::Adaptive) => cfg.fixed_delta = None,
        Some(DeltaArg::Fixed(d)) => cfg.fixed_delta = Some(d),
        None => {}
    }
    Ok(cfg)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport> {
    let ds = load_dataset(&a.data)?;
    let depths = Checkpoint::load_depths(&a.checkpoint)?;
    let cfg = mask_config(&a.checkpoint, a.mask_mode, a.delta)?;
    let Some(report) = evaluate_if_possible(&ds, &depths, &cfg)? else {
        bail!("{} has no ground-truth depth to evaluate against", a.data.display());
    };
    let out = a.out.clone().unwrap_or_else(|| a.checkpoint.join("eval.json"));
    write_json(&out, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskmapReport {
    pub pair: usize,
    pub reference: usize,
    pub source: usize,
    pub delta: f64,
    pub adaptive: bool,
    pub reflective_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_iou: Option<f64>,
}

pub fn cmd_maskmap(a: &MaskmapArgs) -> Result<MaskmapReport> {
    let ds = load_dataset(&a.data)?;
    let depths = Checkpoint::load_depths(&a.checkpoint)?;
    let mut cfg = mask_config(&a.checkpoint, Some(MaskModeArg::Auto), a.delta)?;
    cfg.freeze_mask_after = None;
    let objective = Objective::new(&ds, &cfg)?;
    let n_pairs = objective.pairs().len();
    if a.pair >= n_pairs {
        bail!("pair index {} out of range: the dataset has {n_pairs} pairs", a.pair);
    }
    let (_, states) = objective.evaluate(&depths)?;
    let p = &states[a.pair];
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_pgm(&a.out, &p.mask.mask)?;
    let mask_iou = match &ds.frames[p.reference].gt_reflective {
        Some(gt) => Some(mask_iou(&p.mask.mask, &gt.mask_and(&p.errors.validity)?)?),
        None => None,
    };
    Ok(MaskmapReport {
        pair: a.pair,
        reference: p.reference,
        source: p.source,
        delta: p.margin.delta,
        adaptive: p.margin.adaptive,
        reflective_fraction: p.mask.fraction(&p.errors.validity),
        mask_iou,
    })
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<Vec<ObjectiveCheck>> {
    let mut out = Vec::new();
    for seed in a.first_seed..a.first_seed + a.seeds {
        out.extend(check_seed(seed, a.negative_control)?);
    }
    Ok(out)
}

pub fn cmd_gt_checkpoint(a: &GtCheckpointArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let depths = ds
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| f.gt_depth.clone().with_context(|| format!("frame {i} has no ground-truth depth")))
        .collect::<Result<Vec<_>>>()?;
    let checkpoint = Checkpoint::from_depths(&depths)?;
    checkpoint.save(&a.out)?;
    write_json(&a.out.join(CONFIG_FILE), &serde_json::json!({ "command": "gt-checkpoint", "data": a.data }))?;
    Ok(())
}
