//! `dam3d` command-line front end.
//!
//! Exit status: 0 on success, 2 for usage and configuration errors, 1 for
//! anything that fails at run time. Errors are printed as a single
//! `error: ...` line on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use dam3d::data::SynthConfig;
use dam3d::gradcam::DEFAULT_LAYER;
use dam3d::harness::{cmd_cv, cmd_eval, cmd_gradcam, cmd_synth, cmd_train, GradcamRequest, RunConfig};
use dam3d::metrics::{render_report, ReportStyle};
use dam3d::optim::OptimKind;

#[derive(Parser)]
#[command(name = "dam3d", version, about = "Dual-attention 3D CNN: synthesis, training, evaluation and attribution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled phantom dataset and its manifest.
    Synth(SynthArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Stratified k-fold cross-validation.
    Cv(CvArgs),
    /// Grad-CAM attribution map for one volume.
    Gradcam(GradcamArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON synthesis config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Subjects per class.
    #[arg(long)]
    n: Option<usize>,
    /// Cubic grid extent.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lesion_contrast: Option<f64>,
    #[arg(long)]
    lesion_radius: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    domain_shift: Option<f64>,
    #[arg(long)]
    tag: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Optim {
    Sgd,
    Adam,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config; flags below override it.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset: desk, overfit or paper-iii-a.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<Optim>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Shuffling and initialization seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Channel widths of the four stages, e.g. `8,16,32,64`.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 5)]
    k: usize,
}

#[derive(Args)]
struct GradcamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    volume: PathBuf,
    #[arg(long, default_value_t = 1)]
    class: usize,
    #[arg(long, default_value = DEFAULT_LAYER)]
    layer: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write mid-plane PGM slices.
    #[arg(long)]
    slices: bool,
}

fn read_synth_config(path: &Path) -> anyhow::Result<SynthConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| dam3d::Error::Config(format!("{}: {e}", path.display())).into())
}

fn synth_config(a: &SynthArgs) -> anyhow::Result<SynthConfig> {
    let mut c = match &a.config {
        Some(p) => read_synth_config(p)?,
        None => SynthConfig::for_size(a.size.unwrap_or(SynthConfig::default().size)),
    };
    if a.config.is_some() {
        c.size = a.size.unwrap_or(c.size);
    }
    c.n_per_class = a.n.unwrap_or(c.n_per_class);
    c.seed = a.seed.unwrap_or(c.seed);
    c.lesion_contrast = a.lesion_contrast.unwrap_or(c.lesion_contrast);
    c.lesion_radius_vox = a.lesion_radius.unwrap_or(c.lesion_radius_vox);
    c.noise_sigma = a.noise_sigma.unwrap_or(c.noise_sigma);
    c.domain_shift = a.domain_shift.unwrap_or(c.domain_shift);
    if let Some(t) = &a.tag {
        c.dataset_tag = t.clone();
    }
    c.validate()?;
    Ok(c)
}

fn run_config(a: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut c = match (&a.config, &a.preset) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = a.seed {
        c = c.with_seed(seed);
    }
    if let Some(w) = &a.widths {
        c.model.widths = w.as_slice().try_into().map_err(|_| {
            dam3d::Error::Config(format!("--widths takes 4 values, got {}", w.len()))
        })?;
    }
    if let Some(o) = a.optimizer {
        c.optim.kind = match o {
            Optim::Sgd => OptimKind::SgdMomentum,
            Optim::Adam => OptimKind::Adam,
        };
    }
    c.optim.lr = a.lr.unwrap_or(c.optim.lr);
    c.optim.weight_decay = a.weight_decay.unwrap_or(c.optim.weight_decay);
    c.epochs = a.epochs.unwrap_or(c.epochs);
    c.batch_size = a.batch_size.unwrap_or(c.batch_size);
    if let Some(m) = &a.manifest {
        c.train_manifest = Some(m.clone());
    }
    if let Some(o) = &a.out {
        c.output_dir = o.clone();
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let cfg = synth_config(&a)?;
            if cfg.lesion_contrast == 0.0 {
                eprintln!("warning: --lesion-contrast 0 makes both classes identical; the task is unlearnable");
            }
            let s = cmd_synth(&cfg, &a.out)?;
            println!("manifest: {}", s.manifest.display());
            println!("label 0: {}  label 1: {}", s.counts[0], s.counts[1]);
        }
        Command::Train(a) => {
            let cfg = run_config(&a.run)?;
            let outcome = cmd_train(&cfg, a.resume.as_deref())?;
            if let Some(last) = outcome.log.last() {
                println!(
                    "epoch {}  loss {:.5}  train accuracy {:.4}",
                    last.epoch, last.loss, last.accuracy
                );
            }
            println!("checkpoint: {}", outcome.checkpoint_path.display());
        }
        Command::Eval(a) => {
            let report = cmd_eval(&a.checkpoint, &a.manifest, &a.out)?;
            print!("{}", render_report(&report, ReportStyle::Table));
        }
        Command::Cv(a) => {
            let cfg = run_config(&a.run)?;
            let report = cmd_cv(&cfg, a.k)?;
            print!("{}", render_report(&report, ReportStyle::Table));
        }
        Command::Gradcam(a) => {
            let map = cmd_gradcam(&GradcamRequest {
                checkpoint: &a.checkpoint,
                volume: &a.volume,
                target_class: a.class,
                layer: &a.layer,
                out_dir: &a.out,
                slices: a.slices,
            })?;
            println!("map: {} ({:?}, layer {})", a.out.join("map.rvol").display(), map.input_dims, map.layer);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let usage = matches!(e.downcast_ref::<dam3d::Error>(), Some(dam3d::Error::Config(_)));
            let reason = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {reason}");
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
