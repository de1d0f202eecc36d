use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use hyperdit_cli::*;
use hyperdit_core::eval::best_scale;

#[derive(Parser, Debug)]
#[command(name = "hyperdit", version, about = "Train, sample and evaluate HyperDiT models on toy data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Directory receiving every artifact of the command.
    #[arg(long)]
    run_dir: PathBuf,
    /// Config file; defaults to `<run-dir>/config.toml` when present.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the toy training and reference splits as PNGs.
    GenData {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a model, writing `train_log.tsv` and checkpoints.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Alignment feature file (HDITFEAT format).
        #[arg(long)]
        vfm_features: Option<PathBuf>,
        /// Continue from `checkpoints/latest.ckpt`.
        #[arg(long)]
        resume: bool,
    },
    /// Generate samples as 8-bit PNGs.
    Sample {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Fixed class for every sample; classes cycle otherwise.
        #[arg(long)]
        class: Option<usize>,
        /// Use raw weights instead of the EMA.
        #[arg(long)]
        raw: bool,
    },
    /// Toy-FID and classifier accuracy of generated samples.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        raw: bool,
    },
    /// Toy-FID across `eval.sweep_scales` guidance scales.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        raw: bool,
    },
    /// Print the base patch and unified position indices of both streams.
    InspectRope {
        /// Image side length; defaults to the configured image height.
        #[arg(long)]
        size: Option<usize>,
        /// Large patch size; defaults to the configured value.
        #[arg(long)]
        large: Option<usize>,
        /// Small patch size; defaults to the configured value.
        #[arg(long)]
        small: Option<usize>,
        /// Indices listed per stream.
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn resolve(run: &RunArgs) -> Result<hyperdit_core::RunConfig> {
    resolve_config(run.config.as_deref(), Some(&run.run_dir), &run.overrides)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { run } => {
            let config = resolve(&run)?;
            let out = cmd_gen_data(&config, &run.run_dir)?;
            println!(
                "wrote {} + {} images under {}",
                config.data.train_size,
                config.data.reference_size,
                out.display()
            );
        }
        Command::Train { run, vfm_features, resume } => {
            let mut config = resolve(&run)?;
            if vfm_features.is_some() {
                config.paths.features = vfm_features;
            }
            let outcome = cmd_train(&config, &run.run_dir, resume, |line| eprintln!("{line}"))?;
            match outcome.last_loss {
                Some(loss) => println!("step {} loss {loss:.6} -> {}", outcome.step, outcome.checkpoint.display()),
                None => println!("step {} -> {}", outcome.step, outcome.checkpoint.display()),
            }
        }
        Command::Sample { run, count, class, raw } => {
            let config = resolve(&run)?;
            let out = cmd_sample(&config, &run.run_dir, count, class, raw)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Eval { run, raw } => {
            let config = resolve(&run)?;
            let m = cmd_eval(&config, &run.run_dir, raw)?;
            println!("toy_fid\t{:.6}\naccuracy\t{:.6}", m.toy_fid, m.accuracy);
        }
        Command::Sweep { run, raw } => {
            let config = resolve(&run)?;
            let rows = cmd_sweep(&config, &run.run_dir, raw)?;
            print!("{}", hyperdit_core::eval::sweep_tsv(&rows));
            if let Some(best) = best_scale(&rows) {
                eprintln!("best scale {} (toy_fid {:.6})", best.scale, best.toy_fid);
            }
        }
        Command::InspectRope { size, large, small, count, run_dir, config, overrides } => {
            let config = resolve_config(config.as_deref(), run_dir.as_deref(), &overrides)?;
            let m = &config.model;
            let report = cmd_inspect_rope(
                &config,
                run_dir.as_deref(),
                size.unwrap_or(m.image_height),
                large.unwrap_or(m.large_patch),
                small.unwrap_or(m.small_patch),
                count,
            )?;
            print!("{report}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
