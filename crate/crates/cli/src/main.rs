use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sparsepose_cli::commands::{self, PoseSource, Repr};
use sparsepose_cli::{CliError, PipelineConfig, Result};

#[derive(Parser)]
#[command(name = "sparsepose", version, about = "Multi-view sparse-voxel 6D pose estimation")]
struct Cli {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Resolution {
    /// Fine voxel size in millimetres; overrides the configuration.
    #[arg(long)]
    theta: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Render a synthetic bin scene into a bundle directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        objects: Option<usize>,
    },
    /// Fuse the depth views into a point cloud (PLY) or a sparse TSDF dump.
    Fuse {
        scene: PathBuf,
        #[arg(long, value_enum, default_value = "cloud")]
        repr: Repr,
        #[command(flatten)]
        res: Resolution,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the heatmap and objectness training targets.
    Targets {
        scene: PathBuf,
        #[command(flatten)]
        res: Resolution,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the network on a single scene.
    TrainToy {
        scene: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        res: Resolution,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate poses from a checkpoint, or from ground-truth votes with --oracle.
    Estimate {
        scene: PathBuf,
        #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        oracle: bool,
        #[command(flatten)]
        res: Resolution,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a pose CSV against a scene's ground truth.
    Eval {
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Report MSSD recall with millimetre thresholds instead of diameter fractions.
        #[arg(long)]
        mssd_mm: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count occupied voxels at several resolutions.
    Stats {
        scene: PathBuf,
        /// Comma-separated voxel sizes in millimetres.
        #[arg(long, value_delimiter = ',', default_values_t = [8.0, 4.0, 2.0, 1.0])]
        thetas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let set_theta = |cfg: &mut PipelineConfig, res: &Resolution| -> Result<()> {
        if let Some(t) = res.theta {
            cfg.fusion.theta_mm = t;
        }
        cfg.validate()
    };
    match cli.command {
        Command::Config => {
            cfg.validate()?;
            print!("{}", cfg.to_toml());
        }
        Command::Synth { out, objects } => {
            if let Some(n) = objects {
                cfg.synth.objects = n;
            }
            cfg.validate()?;
            print_json(&commands::cmd_synth(&cfg, &out)?)?;
        }
        Command::Fuse { scene, repr, res, out } => {
            set_theta(&mut cfg, &res)?;
            print_json(&commands::cmd_fuse(&cfg, &scene, repr, &out)?)?;
        }
        Command::Targets { scene, res, out } => {
            set_theta(&mut cfg, &res)?;
            print_json(&commands::cmd_targets(&cfg, &scene, &out)?)?;
        }
        Command::TrainToy { scene, steps, res, out } => {
            set_theta(&mut cfg, &res)?;
            let steps = steps.unwrap_or(cfg.train.steps);
            print_json(&commands::cmd_train_toy(&cfg, &scene, steps, &out)?)?;
        }
        Command::Estimate { scene, checkpoint, oracle, res, out } => {
            set_theta(&mut cfg, &res)?;
            let source = match (&checkpoint, oracle) {
                (_, true) => PoseSource::Oracle,
                (Some(p), false) => PoseSource::Checkpoint(p),
                (None, false) => return Err(CliError::Config("either --checkpoint or --oracle is required".into())),
            };
            let est = commands::cmd_estimate(&cfg, &scene, source, &out)?;
            println!("{} poses written to {}", est.poses.len(), out.display());
        }
        Command::Eval { poses, scene, mssd_mm, out } => {
            cfg.eval.mssd_mm |= mssd_mm;
            cfg.validate()?;
            print_json(&commands::cmd_eval(&cfg, &poses, &scene, &out)?)?;
        }
        Command::Stats { scene, thetas, out } => {
            cfg.validate()?;
            print_json(&commands::cmd_stats(&cfg, &scene, &thetas, &out)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sparsepose: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
