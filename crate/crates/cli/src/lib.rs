//! `pcmcd`: runs the pipeline stages from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use pcm_codesign::config::RunConfig;
use pcm_codesign::pipeline::{eval_files, plot_metrics, Pipeline};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "pcmcd", version, about = "Phase-change metasurface encoder / hyperspectral decoder co-design")]
struct Cli {
    /// Config file, or `default` for the built-in defaults.
    #[arg(long, global = true, default_value = "default")]
    config: PathBuf,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write the n,k table used by the oracle.
    GenDispersion,
    /// Simulate the shape → filter-bank training set.
    GenDataset,
    /// Generate the synthetic training and validation cubes.
    GenScenes,
    TrainSurrogate,
    TrainInverse,
    /// Tune the inverse network through the frozen surrogate.
    FinetuneTandem,
    /// Jointly optimize shape and decoder.
    Codesign,
    /// Retrain decoders on oracle banks of the initial and optimized shapes.
    TwoStageEval,
    /// Compare two cube files.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        recon: PathBuf,
    },
    /// Recompute cond(Φ) for every logged shape.
    CondTrace,
    /// Render loss / PSNR / cond charts from a metrics CSV.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        /// Output directory (default: next to the CSV).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config(cli: &Cli) -> pcm_codesign::Result<RunConfig> {
    let mut cfg = RunConfig::load(&cli.config)?;
    for s in &cli.sets {
        cfg.set_pair(s)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> pcm_codesign::Result<String> {
    match &cli.cmd {
        Cmd::Eval { truth, recon } => {
            let m = eval_files(truth, recon)?;
            return Ok(format!("psnr={},sam={},mse={}", m.psnr, m.sam, m.mse));
        }
        Cmd::Plot { metrics, out } => {
            let out = out.clone().unwrap_or_else(|| metrics.parent().map(|p| p.join("plots")).unwrap_or_else(|| "plots".into()));
            let files = plot_metrics(metrics, &out)?;
            return Ok(format!("plot: {} charts -> {}", files.len(), out.display()));
        }
        _ => {}
    }
    let p = Pipeline::new(config(cli)?);
    match cli.cmd {
        Cmd::GenDispersion => p.gen_dispersion(),
        Cmd::GenDataset => p.gen_dataset(),
        Cmd::GenScenes => p.gen_scenes(),
        Cmd::TrainSurrogate => p.train_surrogate(),
        Cmd::TrainInverse => p.train_inverse(),
        Cmd::FinetuneTandem => p.finetune_tandem(),
        Cmd::Codesign => p.codesign(),
        Cmd::TwoStageEval => p.two_stage(),
        Cmd::CondTrace => p.cond_trace(),
        Cmd::Eval { .. } | Cmd::Plot { .. } => unreachable!("handled above"),
    }
}

/// Caps rayon's pool from `PCMCD_THREADS`; ignored once a pool exists.
fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("PCMCD_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| format!("PCMCD_THREADS must be a positive integer, got {v:?}"))?;
    if n == 0 {
        return Err("PCMCD_THREADS must be a positive integer, got 0".into());
    }
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (including the program name), runs the stage, and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    match dispatch(&cli) {
        Ok(line) => {
            println!("{line}");
            EXIT_OK
        }
        Err(pcm_codesign::Error::Config(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
