//! Command-line front end for the `hgrl` library.

pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use hgrl::config::{self, Override, RunConfig};
use hgrl::data::{Partition, World};
use hgrl::pipeline::{cmd_evaluate, cmd_prepare_graph, cmd_sweep, cmd_train, SweepGrid};
use hgrl::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "hgrl", version, about = "Group-aware compositional zero-shot recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by commands that resolve a run config. Precedence, lowest
/// first: profile defaults, `--config`, `--set`, the dedicated flags.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.k_s=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, value_parser = parse_world)]
    pub world: Option<World>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_world(s: &str) -> std::result::Result<World, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_partition(s: &str) -> std::result::Result<Partition, String> {
    match s {
        "val" => Ok(Partition::Val),
        "test" => Ok(Partition::Test),
        _ => Err(format!("partition must be val or test, got {s:?}")),
    }
}

impl ConfigArgs {
    pub fn overrides(&self) -> Result<Vec<Override>> {
        let mut out: Vec<Override> = self.set.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        let mut flag = |key: &str, value: String| -> Result<()> {
            out.push(format!("{key}={value}").parse()?);
            Ok(())
        };
        if let Some(seed) = self.seed {
            flag("seed", seed.to_string())?;
        }
        if self.deterministic {
            flag("deterministic", "true".into())?;
        }
        if let Some(world) = self.world {
            flag("world", format!("\"{world}\""))?;
        }
        if let Some(out_dir) = &self.out {
            flag("output_dir", toml_string(&out_dir.display().to_string()))?;
        }
        Ok(out)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        config::load(self.config.as_deref(), &self.overrides()?)
    }
}

fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build or reuse the cached word-compatibility graph.
    PrepareGraph(ConfigArgs),
    /// Train and write checkpoints, logs and the resolved config.
    Train(ConfigArgs),
    /// Score a checkpoint and write metrics plus the bias curve.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides applied to the checkpoint's stored config.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, value_parser = parse_world, default_value = "closed")]
        world: World,
        #[arg(long, value_parser = parse_partition, default_value = "test")]
        partition: Partition,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every cell of a hyperparameter grid.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long = "k-s", value_delimiter = ',')]
        k_s: Vec<usize>,
        #[arg(long = "k-o", value_delimiter = ',')]
        k_o: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        lambda: Vec<f64>,
        #[arg(long = "top-k", value_delimiter = ',')]
        top_k: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Plot losses, curves and sweeps from a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareGraph(args) => {
            let g = cmd_prepare_graph(&args.resolve()?)?;
            println!("{}", g.path.display());
        }
        Command::Train(args) => {
            let config = args.resolve()?;
            let summary = cmd_train(&config)?;
            println!("{} {}", summary.checkpoint.display(), summary.checkpoint_hash);
        }
        Command::Evaluate {
            checkpoint,
            set,
            world,
            partition,
            out,
        } => {
            let overrides: Vec<Override> = set.iter().map(|s| s.parse()).collect::<Result<_>>()?;
            let out = out.unwrap_or_else(|| checkpoint.parent().map(PathBuf::from).unwrap_or_default());
            let eval = cmd_evaluate(&checkpoint, &overrides, world, partition, &out)?;
            let r = &eval.report;
            println!("S={:.4} U={:.4} HM={:.4} AUC={:.4} -> {}", r.seen, r.unseen, r.hm, r.auc, eval.json.display());
        }
        Command::Sweep {
            config,
            k_s,
            k_o,
            lambda,
            top_k,
            seeds,
        } => {
            let base = config.resolve()?;
            let grid = SweepGrid {
                k_s,
                k_o,
                lambda,
                top_k,
                seeds,
            };
            let rows = cmd_sweep(&base, &grid)?;
            println!("{} rows -> {}", rows.len(), base.output_dir.join(hgrl::pipeline::SWEEP_CSV).display());
        }
        Command::Report { run, out } => {
            let out = out.unwrap_or_else(|| run.clone());
            for p in report::cmd_report(&run, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
