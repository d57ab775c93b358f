mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use lesionpaint::{Error, SamplerMode};

use crate::config::RunConfig;

/// Diffusion inpainting for lesion filling and synthesis on synthetic phantoms.
#[derive(Debug, Parser)]
#[command(name = "lesionpaint", version)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a corpus of healthy/lesioned phantom pairs.
    GenPhantoms(GenArgs),
    /// Train a mask-conditioned denoiser on a corpus.
    Train(TrainArgs),
    /// Replace lesions with healthy-looking tissue.
    Fill(InpaintArgs),
    /// Paint lesions into a healthy image.
    Synth(InpaintArgs),
    /// Score predictions against a ground-truth corpus.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of pairs.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Image side length.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Corpus directory written by gen-phantoms.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Weights file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct InpaintArgs {
    /// Input image (IGRD).
    #[arg(long)]
    image: Option<PathBuf>,
    /// Lesion mask (fill) or target mask (synth), binary PGM.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Output image; the report and resolved config are written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// White-matter mask (ring statistics for fill, intersection and scoring for synth).
    #[arg(long)]
    wm_mask: Option<PathBuf>,
    /// Healthy ground truth, enables MAE and PSNR in the fill report.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    mode: Option<SamplerMode>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    repaint_reps: Option<usize>,
    /// Refinement start timestep, or `none`.
    #[arg(long, value_parser = parse_refine)]
    refine_t: Option<RefineStart>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dilation: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of predicted pairs.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Ground-truth corpus directory.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Report JSON to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dilation used when the fills were produced.
    #[arg(long)]
    dilation: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct RefineStart(Option<usize>);

fn parse_refine(s: &str) -> Result<RefineStart, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(RefineStart(None));
    }
    s.parse().map(|t| RefineStart(Some(t))).map_err(|e| format!("{e}"))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, v: Option<PathBuf>) {
    if v.is_some() {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenPhantoms(a) => {
            set_path(&mut cfg.paths.output, a.out);
            set(&mut cfg.corpus.n, a.n);
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.phantom.size, a.size);
            commands::gen_phantoms(&cfg)
        }
        Command::Train(a) => {
            set_path(&mut cfg.paths.corpus, a.corpus);
            set_path(&mut cfg.paths.output, a.out);
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.batch_size, a.batch_size);
            set(&mut cfg.train.learning_rate, a.lr);
            set(&mut cfg.train.rng_seed, a.seed);
            commands::train(&cfg)
        }
        Command::Fill(a) => {
            apply_inpaint(&mut cfg, a);
            commands::fill(&cfg)
        }
        Command::Synth(a) => {
            apply_inpaint(&mut cfg, a);
            commands::synth(&cfg)
        }
        Command::Eval(a) => {
            set_path(&mut cfg.paths.prediction, a.pred);
            set_path(&mut cfg.paths.truth, a.truth);
            set_path(&mut cfg.paths.output, a.out);
            set(&mut cfg.sampler.mask_dilation, a.dilation);
            commands::eval(&cfg)
        }
    }
}

fn apply_inpaint(cfg: &mut RunConfig, a: InpaintArgs) {
    set_path(&mut cfg.paths.image, a.image);
    set_path(&mut cfg.paths.mask, a.mask);
    set_path(&mut cfg.paths.weights, a.weights);
    set_path(&mut cfg.paths.output, a.out);
    set_path(&mut cfg.paths.wm_mask, a.wm_mask);
    set_path(&mut cfg.paths.truth, a.truth);
    set(&mut cfg.sampler.mode, a.mode);
    set(&mut cfg.sampler.stride, a.stride);
    set(&mut cfg.sampler.repaint_reps, a.repaint_reps);
    set(&mut cfg.sampler.refine_timestep, a.refine_t.map(|r| r.0));
    set(&mut cfg.sampler.rng_seed, a.seed);
    set(&mut cfg.sampler.mask_dilation, a.dilation);
}

/// 2 for bad configuration, 3 for I/O and shape problems, 4 for numerical failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Domain(_) | Error::Unsupported(_) => 2,
                Error::Dimension(_) | Error::Format(_) | Error::Io(_) => 3,
                Error::NonFinite(_) => 4,
            };
        }
        if cause.is::<serde_json::Error>() {
            return 2;
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
