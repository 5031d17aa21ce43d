use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use simi::ablation::{run_ablation, AblationOptions, LossThreshold, VARIANTS};
use simi::decompose::{decompose, DecompositionMode, PLANES_PER_CHANNEL};
use simi::enhancer::Checkpoint;
use simi::evaluate::{dump_trace, enhance_with_trace, evaluate_dirs};
use simi::gradcheck::{run_suite, TOLERANCE};
use simi::imageio::{gray_from_unit, load_image, save_image};
use simi::trainer::{TrainConfig, Trainer};
use simi::{Result, SimiError};

/// Low-light image enhancement with bit-plane self-information mining.
#[derive(Parser, Debug)]
#[command(name = "simi", version, arg_required_else_help = true)]
struct Cli {
    /// Seed for initialisation, data order and sampling (overrides the config file)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel evaluation
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON training configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write every decomposition map of an image as a grayscale PNG
    Decompose {
        #[arg(long, default_value = "bitplane")]
        mode: DecompositionMode,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train from scratch, or continue from a checkpoint
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Enhance one image
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory receiving per-stage images and curve maps
        #[arg(long)]
        dump_trace: Option<PathBuf>,
    },
    /// Score enhanced low-light images against references paired by file name
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        low_dir: PathBuf,
        #[arg(long)]
        ref_dir: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference check of every op and the full training loss
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        size: usize,
        /// Also write every checked entry as JSON
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train each input-representation variant and tabulate the results
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated subset of bitplane, log, quant, no-simm
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Convergence threshold as a fraction of the first-step loss
        #[arg(long, conflicts_with = "threshold_abs")]
        threshold: Option<f64>,
        /// Convergence threshold as an absolute loss value
        #[arg(long)]
        threshold_abs: Option<f64>,
        #[arg(long, requires = "ref_dir")]
        low_dir: Option<PathBuf>,
        #[arg(long, requires = "low_dir")]
        ref_dir: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the parameter count of the configured model
    Params,
}

#[derive(Args, Debug)]
struct Overrides {
    /// Total number of iterations (overrides the config file)
    #[arg(long)]
    iterations: Option<u64>,
}

fn load_config(cli: &Cli, overrides: Option<&Overrides>) -> Result<TrainConfig> {
    let mut config = match &cli.config {
        Some(path) => TrainConfig::from_json_file(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.model.seed = seed;
    }
    if let Some(n) = overrides.and_then(|o| o.iterations) {
        config.max_iterations = n;
    }
    config.validate()?;
    Ok(config)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| SimiError::InvalidConfig(e.to_string()))?;
    }
    match &cli.command {
        Command::Decompose { mode, input, out_dir } => {
            mode.validate()?;
            let img = load_image(input)?;
            let stack = decompose::<f64>(&img, mode)?;
            fs::create_dir_all(out_dir)?;
            let (w, h) = stack.dims();
            for c in 0..3 {
                for k in 0..PLANES_PER_CHANNEL {
                    let path = out_dir.join(format!("c{c}_p{k}.png"));
                    save_image(&gray_from_unit(stack.map(c, k), w, h)?, &path)?;
                    println!("{}", path.display());
                }
            }
        }
        Command::Train { data, out_dir, resume, overrides } => {
            let config = load_config(cli, Some(overrides))?;
            let mut trainer = match resume {
                Some(ckpt) => Trainer::<f32>::from_checkpoint(ckpt, config, data, out_dir)?,
                None => Trainer::<f32>::new(config, data, out_dir)?,
            };
            let every = trainer.config().checkpoint_every;
            let last = trainer.run_with(|step, r| {
                if step % every == 0 {
                    eprintln!("step {step}: total {:.6}", r.total);
                }
            })?;
            println!("{}", last.display());
        }
        Command::Enhance { checkpoint, input, out, dump_trace: trace_dir } => {
            let ckpt = Checkpoint::<f32>::load(checkpoint)?;
            let (enhanced, trace) = enhance_with_trace(&load_image(input)?, &ckpt)?;
            save_image(&enhanced, out)?;
            if let Some(dir) = trace_dir {
                dump_trace(&trace, dir)?;
            }
        }
        Command::Eval { checkpoint, low_dir, ref_dir, report } => {
            let ckpt = Checkpoint::<f32>::load(checkpoint)?;
            let metrics = evaluate_dirs(&ckpt, low_dir, ref_dir)?;
            write_json(report, &metrics)?;
            println!("mean_psnr {:.4}\nmean_ssim {:.4}", metrics.mean_psnr, metrics.mean_ssim);
        }
        Command::Gradcheck { size, report } => {
            let result = run_suite(*size, cli.seed.unwrap_or(0))?;
            if let Some(path) = report {
                write_json(path, &result)?;
            }
            let max = result.max_rel_err();
            println!("max_rel_err {max:.3e}");
            if let Some(worst) = result.worst() {
                eprintln!("worst: {} ({} entries checked)", worst.name, worst.checked);
            }
            if !result.passed(TOLERANCE) {
                eprintln!("gradient check failed: {max:.3e} >= {TOLERANCE:.0e}");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Ablate { data, out_dir, variants, threshold, threshold_abs, low_dir, ref_dir, overrides } => {
            let config = load_config(cli, Some(overrides))?;
            let mut options = AblationOptions::default();
            if let Some(v) = variants {
                options.variants = v.clone();
            }
            options.threshold = match (threshold, threshold_abs) {
                (_, Some(v)) => LossThreshold::Absolute(*v),
                (Some(f), None) => LossThreshold::Relative(*f),
                (None, None) => LossThreshold::default(),
            };
            options.eval = low_dir.clone().zip(ref_dir.clone());
            if let Some(bad) = options.variants.iter().find(|v| !VARIANTS.contains(&v.as_str())) {
                return Err(SimiError::InvalidConfig(format!("unknown ablation variant {bad:?}")));
            }
            fs::create_dir_all(out_dir)?;
            let report = run_ablation::<f32>(&config, data, out_dir, &options)?;
            print!("{}", report.to_table());
        }
        Command::Params => {
            let config = load_config(cli, None)?;
            println!("{}", config.model.parameter_count());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
