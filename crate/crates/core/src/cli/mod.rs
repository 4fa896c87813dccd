//! Batch command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! training error.

mod settings;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use settings::{List, Settings};

use crate::data::{
    generate_synthetic, load_checkpoint, load_manifest, load_sample, load_split, pgm, save_checkpoint,
    Checkpoint, DatasetManifest, LoadedSample, Split,
};
use crate::model::ModelConfig;
use crate::patching::{build_masking_plan, compute_valid_set, split_into_patches, MaskingStrategy};
use crate::training::{self, LabeledSample, UnlabeledSample};
use crate::verify;

pub const RESOLVED_CONFIG: &str = "resolved-config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.rgmm";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";

/// Gradient checks pass below this maximum relative error.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "rgmim", version, about = "Region-guided masked image modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic 4-class corpus (images, masks, manifest).
    GenData(Flags),
    /// Self-supervised reconstruction pretraining on the train split.
    Pretrain(Flags),
    /// Supervised fine-tuning of an encoder plus a linear head.
    Finetune(Flags),
    /// Test-split accuracy and confusion counts of a fine-tuned checkpoint.
    Eval(Flags),
    /// Render one sample's original, mask overlay and masked image.
    MaskViz(Flags),
    /// Pretrain, fine-tune and evaluate over masking ratios and strategies.
    Sweep(Flags),
    /// Compare analytic and finite-difference gradients of the tiny model.
    GradCheck(Flags),
}

#[derive(Debug, Default, Args)]
struct Flags {
    /// `key = value` config file applied over the defaults
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dataset manifest CSV
    #[arg(long, value_name = "FILE")]
    manifest: Option<String>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
    /// Input checkpoint (finetune, eval)
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<String>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// region or random
    #[arg(long, value_name = "STRATEGY")]
    mask_strategy: Option<MaskingStrategy>,
    #[arg(long, value_name = "F")]
    mask_ratio: Option<f64>,
    #[arg(long, value_name = "INT")]
    patch_size: Option<usize>,
    /// Epochs of the phase being run (both phases for sweep)
    #[arg(long, value_name = "INT")]
    epochs: Option<usize>,
    #[arg(long, value_name = "INT")]
    batch: Option<usize>,
    /// Base learning rate, scaled by batch/256
    #[arg(long, value_name = "F")]
    lr: Option<f64>,
    #[arg(long, value_name = "F")]
    label_fraction: Option<f64>,
    /// Train only the classification head
    #[arg(long)]
    freeze_encoder: bool,
    /// Record wall-clock seconds in metrics CSVs
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Config(m) | Self::Runtime(m) => f.write_str(m),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Clone, Copy, PartialEq)]
enum Phase {
    Pretrain,
    Finetune,
    Both,
    None,
}

/// Defaults, then the config file, then flags.
fn resolve(flags: &Flags, phase: Phase) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        s.apply_file(&text, &path.display().to_string()).map_err(CliError::Config)?;
    }
    if let Some(v) = &flags.manifest {
        s.manifest = v.clone();
    }
    if let Some(v) = &flags.out {
        s.out = v.clone();
    }
    if let Some(v) = &flags.checkpoint {
        s.checkpoint = v.clone();
    }
    if let Some(v) = flags.seed {
        s.seed = v;
    }
    if let Some(v) = flags.mask_strategy {
        s.mask_strategy = v;
    }
    if let Some(v) = flags.mask_ratio {
        s.mask_ratio = v;
    }
    if let Some(v) = flags.patch_size {
        s.patch_size = v;
    }
    if let Some(v) = flags.epochs {
        if matches!(phase, Phase::Pretrain | Phase::Both) {
            s.pretrain_epochs = v;
        }
        if matches!(phase, Phase::Finetune | Phase::Both) {
            s.finetune_epochs = v;
        }
    }
    if let Some(v) = flags.batch {
        s.batch_size = v;
    }
    if let Some(v) = flags.lr {
        s.base_lr = v;
    }
    if let Some(v) = flags.label_fraction {
        s.label_fraction = v;
    }
    s.freeze_encoder |= flags.freeze_encoder;
    s.wall_clock |= flags.wall_clock;
    s.validate().map_err(CliError::Config)?;
    Ok(s)
}

/// Creates the output directory and echoes the resolved settings into it.
fn prepare_out(s: &Settings) -> Result<PathBuf> {
    let out = PathBuf::from(&s.out);
    fs::create_dir_all(&out).map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;
    write(&out.join(RESOLVED_CONFIG), s.render().as_bytes())?;
    Ok(out)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

/// Settings stored inside checkpoints leave out file locations, so
/// identical runs in different directories agree byte for byte.
fn checkpoint_config(s: &Settings) -> String {
    s.render_except(&["out", "manifest", "checkpoint"])
}

fn manifest(s: &Settings) -> Result<DatasetManifest> {
    if s.manifest.is_empty() {
        return Err(CliError::Config("no manifest given (use --manifest or `manifest = ...`)".into()));
    }
    load_manifest(Path::new(&s.manifest)).map_err(runtime)
}

/// Loads the manifest and checks its class count against the settings.
fn labeled_manifest(s: &Settings) -> Result<DatasetManifest> {
    let m = manifest(s)?;
    if m.classes != s.classes {
        return Err(runtime(format!(
            "manifest has {} classes but the model is configured for {} (set `classes`)",
            m.classes, s.classes
        )));
    }
    Ok(m)
}

fn unlabeled(samples: &[LoadedSample], s: &Settings) -> Result<Vec<UnlabeledSample>> {
    samples
        .iter()
        .map(|x| UnlabeledSample::new(&x.image, &x.mask, s.patch_size, s.overlap_threshold))
        .collect::<std::result::Result<_, _>>()
        .map_err(runtime)
}

fn labeled(samples: &[LoadedSample], s: &Settings) -> Result<Vec<LabeledSample>> {
    samples
        .iter()
        .map(|x| LabeledSample::new(&x.image, x.label, s.patch_size))
        .collect::<std::result::Result<_, _>>()
        .map_err(runtime)
}

fn load(m: &DatasetManifest, split: Split, s: &Settings) -> Result<Vec<LoadedSample>> {
    let samples = load_split(m, split, s.image_size).map_err(runtime)?;
    if samples.is_empty() {
        return Err(runtime(format!("manifest has no {split} samples")));
    }
    Ok(samples)
}

fn gen_data(s: &Settings) -> Result<()> {
    let spec = s.synthetic_spec();
    spec.validate(s.patch_size).map_err(|e| CliError::Config(e.to_string()))?;
    let out = prepare_out(s)?;
    let m = generate_synthetic(&spec, &out).map_err(runtime)?;
    println!("wrote {} samples to {}", m.records.len(), out.join("manifest.csv").display());
    Ok(())
}

fn pretrain(s: &Settings) -> Result<()> {
    let m = manifest(s)?;
    let train = unlabeled(&load(&m, Split::Train, s)?, s)?;
    let out = prepare_out(s)?;
    let cfg = s.model_config();
    let result = training::pretrain(&train, &cfg, &s.pretrain_run()).map_err(runtime)?;
    let ck = Checkpoint::new(&result.params, &checkpoint_config(s), Some(&result.optimizer));
    save_checkpoint(&out.join(CHECKPOINT_FILE), &ck).map_err(runtime)?;
    write(&out.join(METRICS_FILE), result.metrics.to_csv(s.wall_clock).as_bytes())?;
    if let Some(last) = result.metrics.rows.last() {
        println!("pretrain epoch {} loss {:.6e}", last.epoch, last.loss);
    }
    Ok(())
}

fn load_params_checkpoint(s: &Settings) -> Result<Checkpoint> {
    if s.checkpoint.is_empty() {
        return Err(CliError::Config("no checkpoint given (use --checkpoint)".into()));
    }
    load_checkpoint(Path::new(&s.checkpoint)).map_err(runtime)
}

fn finetune(s: &Settings) -> Result<()> {
    let m = labeled_manifest(s)?;
    let train = labeled(&load(&m, Split::Train, s)?, s)?;
    let cfg = s.model_config();
    let encoder = if s.checkpoint.is_empty() {
        None
    } else {
        Some(load_params_checkpoint(s)?.encoder(&cfg).map_err(runtime)?)
    };
    let out = prepare_out(s)?;
    let result = training::finetune(&train, encoder.as_ref(), &cfg, &s.finetune_run()).map_err(runtime)?;
    let ck = Checkpoint::new(&result.params, &checkpoint_config(s), Some(&result.optimizer));
    save_checkpoint(&out.join(CHECKPOINT_FILE), &ck).map_err(runtime)?;
    write(&out.join(METRICS_FILE), result.metrics.to_csv(s.wall_clock).as_bytes())?;
    if let Some(last) = result.metrics.rows.last() {
        println!(
            "finetune epoch {} loss {:.6e} train accuracy {:.6}",
            last.epoch,
            last.loss,
            last.accuracy.unwrap_or(0.0)
        );
    }
    Ok(())
}

fn confusion_csv(confusion: &[Vec<usize>]) -> String {
    let k = confusion.len();
    let mut out = String::from("true\\predicted");
    for c in 0..k {
        out.push_str(&format!(",{c}"));
    }
    out.push('\n');
    for (t, row) in confusion.iter().enumerate() {
        out.push_str(&t.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

fn eval(s: &Settings) -> Result<()> {
    let m = labeled_manifest(s)?;
    let test = labeled(&load(&m, Split::Test, s)?, s)?;
    let cfg = s.model_config();
    let params = load_params_checkpoint(s)?.params(&cfg).map_err(runtime)?;
    if params.head.is_none() {
        return Err(runtime(format!("checkpoint {} has no classification head; fine-tune it first", s.checkpoint)));
    }
    let out = prepare_out(s)?;
    let e = training::evaluate(&test, &params, &cfg).map_err(runtime)?;
    write(&out.join(CONFUSION_FILE), confusion_csv(&e.confusion).as_bytes())?;
    write(&out.join("accuracy.txt"), format!("{:.6}\n", e.accuracy).as_bytes())?;
    println!("test accuracy {:.6} on {} samples", e.accuracy, test.len());
    Ok(())
}

/// Masked patches are painted this gray.
const MASK_FILL: f64 = 0.5;

fn mask_viz(s: &Settings) -> Result<()> {
    let m = manifest(s)?;
    let rec = m.records.get(s.viz_index).ok_or_else(|| {
        CliError::Config(format!("viz_index {} is out of range for {} samples", s.viz_index, m.records.len()))
    })?;
    let (img, mask) = load_sample(rec, s.image_size).map_err(runtime)?;
    let pg = split_into_patches(&img, s.patch_size).map_err(runtime)?;
    let valid = compute_valid_set(&mask, s.patch_size, s.overlap_threshold).map_err(runtime)?;
    let plan = build_masking_plan(pg.len(), &valid, s.mask_ratio, s.mask_strategy, s.seed).map_err(runtime)?;
    let out = prepare_out(s)?;

    let gray = vec![MASK_FILL; pg.patch_len()];
    let overrides: Vec<(usize, &[f64])> = plan.masked.iter().map(|&i| (i, gray.as_slice())).collect();
    let masked = crate::patching::reassemble_image(&pg, &overrides).map_err(runtime)?;
    // Organ pixels are lifted halfway to white, the rest halved.
    let overlay: Vec<f64> = img
        .pixels()
        .iter()
        .zip(mask.bits())
        .map(|(&v, &b)| if b { 0.5 + 0.5 * v } else { 0.5 * v })
        .collect();
    let save = |name: &str, values: &[f64]| {
        let g = pgm::Gray8 {
            width: img.width(),
            height: img.height(),
            pixels: pgm::quantize(values),
        };
        pgm::write_pgm(&out.join(name), &g).map_err(runtime)
    };
    save("original.pgm", img.pixels())?;
    save("overlay.pgm", &overlay)?;
    save("masked.pgm", masked.pixels())?;
    println!(
        "masked {} of {} patches ({} valid{})",
        plan.m(),
        plan.n,
        valid.len(),
        if plan.clamped { ", clamped" } else { "" }
    );
    Ok(())
}

fn sweep(s: &Settings) -> Result<()> {
    let m = labeled_manifest(s)?;
    let train = load(&m, Split::Train, s)?;
    let test = labeled(&load(&m, Split::Test, s)?, s)?;
    let out = prepare_out(s)?;
    let rows = training::sweep_masking_ratio(
        &unlabeled(&train, s)?,
        &labeled(&train, s)?,
        &test,
        &s.model_config(),
        &s.pretrain_run(),
        &s.finetune_run(),
        &s.sweep_ratios.0,
        &s.sweep_strategies.0,
    )
    .map_err(runtime)?;
    let csv = training::sweep_csv(&rows);
    write(&out.join(SWEEP_FILE), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn grad_check(s: &Settings, write_out: bool) -> Result<()> {
    if write_out {
        prepare_out(s)?;
    }
    let report = verify::composite_check(&ModelConfig::tiny(), 16, 0.75, s.seed).map_err(runtime)?;
    let worst = report.max_relative_error();
    println!(
        "pretrain max relative error {:.3e} at {}",
        report.pretrain.max_relative_error, report.pretrain_worst
    );
    println!(
        "finetune max relative error {:.3e} at {}",
        report.finetune.max_relative_error, report.finetune_worst
    );
    println!("max relative error {worst:.3e}");
    if worst < GRAD_CHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "max relative error {worst:.3e} exceeds {GRAD_CHECK_TOLERANCE:e}"
        )))
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(f) => gen_data(&resolve(&f, Phase::None)?),
        Command::Pretrain(f) => pretrain(&resolve(&f, Phase::Pretrain)?),
        Command::Finetune(f) => finetune(&resolve(&f, Phase::Finetune)?),
        Command::Eval(f) => eval(&resolve(&f, Phase::None)?),
        Command::MaskViz(f) => mask_viz(&resolve(&f, Phase::None)?),
        Command::Sweep(f) => sweep(&resolve(&f, Phase::Both)?),
        Command::GradCheck(f) => {
            let write_out = f.out.is_some();
            grad_check(&resolve(&f, Phase::None)?, write_out)
        }
    }
}

/// Runs one invocation and returns its exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
