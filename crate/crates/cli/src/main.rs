//! `mosaic` — driver for the hierarchical block-sparse attention engine.
//!
//! Exit codes: 0 when everything requested completed and passed, 2 for
//! configuration errors (the message names the offending field), 3 for
//! runtime failures and failed checks.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use mosaic_cli::commands;
use mosaic_cli::config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(
    name = "mosaic",
    version,
    about = "Hierarchical block-sparse attention over curve-ordered grids",
    after_help = "Settings come from defaults, then an optional --config file, \
                  then flags. `mosaic config` prints the effective configuration."
)]
struct Cli {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Worker threads (or set MOSAIC_THREADS). Defaults to all cores.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Per-field overrides of the configuration file. Enumerated fields reuse the
/// config codec, so their error messages match the file format's.
#[derive(Args)]
struct Overrides {
    /// Square grid side for mask/verify/train.
    #[arg(long, global = true)]
    grid: Option<u32>,
    /// Comma-separated grid sides for the bench sweep.
    #[arg(long, global = true, value_delimiter = ',', value_name = "SIDES")]
    sweep: Option<Vec<u32>>,
    /// Local attention window side.
    #[arg(long, global = true)]
    window: Option<u32>,
    /// Halo ring width in cells.
    #[arg(long, global = true)]
    halo: Option<u32>,
    /// Guidance downsampling ratio.
    #[arg(long, global = true)]
    rho: Option<u32>,
    /// Guidance grid side (0 = derive from rho).
    #[arg(long, global = true)]
    lr_side: Option<u32>,
    /// Number of text conditioning tokens.
    #[arg(long, global = true)]
    text_len: Option<usize>,
    /// Query-tile rows.
    #[arg(long, global = true)]
    q_tile: Option<usize>,
    /// Key-tile columns.
    #[arg(long, global = true)]
    k_tile: Option<usize>,
    /// Head dimension for kernel benchmarks.
    #[arg(long, global = true)]
    head_dim: Option<usize>,
    /// Working precision: f32 | f64.
    #[arg(long, global = true)]
    precision: Option<String>,
    /// RNG seed for every seeded draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Timed repetitions per measurement.
    #[arg(long, global = true)]
    repetitions: Option<usize>,
    /// Output directory.
    #[arg(long, short = 'o', global = true)]
    output: Option<String>,
    /// Image-to-guidance visibility: region | all | off.
    #[arg(long, global = true)]
    guidance: Option<String>,
    /// Guidance self-attention: global | local.
    #[arg(long, global = true)]
    lr_self: Option<String>,
    /// Optimization steps for train.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// SGD learning rate.
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    /// Trainable set: lora | full.
    #[arg(long, global = true)]
    train_mode: Option<String>,
    /// Adapter rank.
    #[arg(long, global = true)]
    lora_rank: Option<usize>,
    /// Latent channels.
    #[arg(long, global = true)]
    channels: Option<usize>,
    /// Euler steps per sampling level.
    #[arg(long, global = true)]
    sample_steps: Option<usize>,
    /// Upscaling levels above the base grid.
    #[arg(long, global = true)]
    levels: Option<u32>,
    /// Side of the coarsest sampling level.
    #[arg(long, global = true)]
    base_side: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the tri-state tile mask and export it with an occupancy sidecar.
    Mask,
    /// Run the self-check suites: Hilbert curve, mask consistency,
    /// kernel-vs-oracle, and gradients. Oracle-backed suites clamp the grid
    /// side to 64 to stay within the dense-oracle budget.
    Verify {
        /// Corrupt one mask tile first, to prove the checker catches it.
        #[arg(long)]
        inject_mask_fault: bool,
    },
    /// Sweep grid sides, timing the tile-skipping kernel against the
    /// visit-everything baseline (guidance self-attention is windowed during
    /// sweeps so the key budget stays linear).
    Bench,
    /// Train the toy guided flow-matching model on the synthetic dataset;
    /// 0 steps serializes the seeded initialization unchanged.
    Train,
    /// Integrate a checkpoint's velocity field coarse-to-fine and export the
    /// final grid (optionally as a PGM image).
    Sample {
        /// Checkpoint produced by `train`.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Conditioning mode id (the single text token).
        #[arg(long, default_value_t = 0)]
        mode: usize,
        /// Also write channel 0 as an ASCII PGM image.
        #[arg(long)]
        pgm: bool,
    },
    /// Print the effective configuration in the flat file format.
    Config,
}

fn apply_overrides(cfg: &mut RunConfig, o: &Overrides) -> Result<(), ConfigError> {
    if let Some(v) = o.grid {
        cfg.grid_side = v;
    }
    if let Some(v) = &o.sweep {
        cfg.sweep = v.clone();
    }
    if let Some(v) = o.window {
        cfg.window = v;
    }
    if let Some(v) = o.halo {
        cfg.halo = v;
    }
    if let Some(v) = o.rho {
        cfg.rho = v;
    }
    if let Some(v) = o.lr_side {
        cfg.lr_side = v;
    }
    if let Some(v) = o.text_len {
        cfg.text_len = v;
    }
    if let Some(v) = o.q_tile {
        cfg.q_tile = v;
    }
    if let Some(v) = o.k_tile {
        cfg.k_tile = v;
    }
    if let Some(v) = o.head_dim {
        cfg.head_dim = v;
    }
    if let Some(v) = &o.precision {
        cfg.set("precision", v)?;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.repetitions {
        cfg.repetitions = v;
    }
    if let Some(v) = &o.output {
        cfg.output = v.clone();
    }
    if let Some(v) = &o.guidance {
        cfg.set("guidance", v)?;
    }
    if let Some(v) = &o.lr_self {
        cfg.set("lr_self", v)?;
    }
    if let Some(v) = o.steps {
        cfg.steps = v;
    }
    if let Some(v) = o.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = &o.train_mode {
        cfg.set("train_mode", v)?;
    }
    if let Some(v) = o.lora_rank {
        cfg.lora_rank = v;
    }
    if let Some(v) = o.channels {
        cfg.channels = v;
    }
    if let Some(v) = o.sample_steps {
        cfg.sample_steps = v;
    }
    if let Some(v) = o.levels {
        cfg.levels = v;
    }
    if let Some(v) = o.base_side {
        cfg.base_side = v;
    }
    Ok(())
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &cli.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("MOSAIC_THREADS") {
            Ok(v) => Some(v.parse::<usize>().map_err(|e| {
                ConfigError(format!("field `MOSAIC_THREADS`: bad value `{v}`: {e}"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(ConfigError("field `threads`: must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("initializing the worker thread pool")?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = effective_config(cli)?;
    init_threads(cli.threads)?;
    match &cli.command {
        Command::Mask => commands::cmd_mask(&cfg),
        Command::Verify { inject_mask_fault } => commands::cmd_verify(&cfg, *inject_mask_fault),
        Command::Bench => commands::cmd_bench(&cfg),
        Command::Train => commands::cmd_train(&cfg),
        Command::Sample { checkpoint, mode, pgm } => {
            commands::cmd_sample(&cfg, checkpoint, *mode, *pgm)
        }
        Command::Config => {
            print!("{}", cfg.serialize());
            Ok(true)
        }
    }
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|c| {
        c.downcast_ref::<ConfigError>().is_some()
            || matches!(c.downcast_ref::<mosaic_core::Error>(), Some(mosaic_core::Error::Config(_)))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("mosaic: one or more checks failed");
            ExitCode::from(3)
        }
        Err(err) => {
            eprintln!("mosaic: error: {err:#}");
            ExitCode::from(if is_config_error(&err) { 2 } else { 3 })
        }
    }
}
