//! Command-line driver: synthetic cohort generation, training, inference,
//! evaluation and reporting on top of `weseg-core`.

pub mod commands;
pub mod config;
pub mod report;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use weseg_core::train::Method;

use crate::commands::InferInput;
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "weseg", version, about = "Weakly supervised tile segmentation from tumor percentages")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; defaults apply to every missing field.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the configuration and WESEG_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test cohorts.
    Generate,
    /// Train one method on a generated data directory.
    Train {
        /// Directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// weseg, alphabeta-<alpha>-<beta>, supervised or attention_mil.
        #[arg(long)]
        method: Method,
        /// Learning rate, overriding the configuration.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Random search over learning rates for one method.
    Sweep {
        /// Directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// weseg, alphabeta-<alpha>-<beta>, supervised or attention_mil.
        #[arg(long)]
        method: Method,
        /// Number of sampled learning rates, overriding the configuration.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Score the tiles of a cohort or of one PPM raster with a checkpoint.
    Infer {
        /// checkpoint.txt of a trained run.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cohort manifest (CSV) to score.
        #[arg(long, conflicts_with = "image", required_unless_present = "image")]
        manifest: Option<PathBuf>,
        /// Binary PPM raster to tile and score.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Replace a cohort's annotations with predicted tumor shares.
    Refine {
        /// checkpoint.txt of a trained run.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cohort manifest (CSV) whose annotations are replaced.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Evaluate every trained run of a results directory.
    Evaluate {
        /// Directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Directory holding one subdirectory per trained run.
        #[arg(long)]
        results: PathBuf,
        /// Cohort to evaluate on; repeat for several.
        #[arg(long = "cohort", default_value = "test")]
        cohorts: Vec<String>,
    },
    /// Comparison table and ROC plots from evaluated runs.
    Report {
        /// Directory holding one subdirectory per trained run.
        #[arg(long)]
        results: PathBuf,
        /// Cohorts that must be present; defaults to every evaluated one.
        #[arg(long = "cohort")]
        cohorts: Vec<String>,
    },
    /// Generate, train every configured method, evaluate and report.
    Pipeline {
        /// Pick each method's learning rate by random search first.
        #[arg(long)]
        sweep: bool,
    },
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref().context("this command needs --out")
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let config = RunConfig::resolve(g.config.as_deref(), g.seed, g.threads)?;
    if config.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build_global()
            .context("configuring the worker pool")?;
    }
    log::info!("root seed {}", config.seed);
    match &cli.command {
        Command::Generate => commands::generate(&config, require_out(&g.out)?),
        Command::Train { data, method, lr } => {
            let mut config = config.clone();
            if let Some(lr) = lr {
                config.train.lr = *lr;
            }
            config.validate()?;
            commands::train(&config, data, *method, require_out(&g.out)?).map(drop)
        }
        Command::Sweep { data, method, trials } => {
            let trials = trials.unwrap_or(config.search.trials);
            let best = commands::sweep(&config, data, *method, trials, require_out(&g.out)?)?;
            println!("{best:e}");
            Ok(())
        }
        Command::Infer {
            checkpoint,
            manifest,
            image,
        } => {
            let input = match (manifest, image) {
                (Some(m), None) => InferInput::Manifest(m),
                (None, Some(i)) => InferInput::Image(i),
                _ => bail!("give exactly one of --manifest and --image"),
            };
            commands::infer(&config, checkpoint, input, require_out(&g.out)?)
        }
        Command::Refine { checkpoint, manifest } => {
            let path = commands::refine(&config, checkpoint, manifest, require_out(&g.out)?)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Evaluate { data, results, cohorts } => {
            for cohort in cohorts {
                commands::evaluate(&config, data, results, cohort)?;
            }
            Ok(())
        }
        Command::Report { results, cohorts } => {
            let out = g.out.as_deref().unwrap_or(results);
            finish_report(results, cohorts, out)
        }
        Command::Pipeline { sweep } => pipeline(&config, require_out(&g.out)?, *sweep),
    }
}

fn finish_report(results: &Path, cohorts: &[String], out: &Path) -> Result<()> {
    let report = report::write_report(results, cohorts, out)?;
    print!("{}", report::markdown(&report));
    if report.absent > 0 {
        bail!("{} method/cohort results are absent", report.absent);
    }
    Ok(())
}

/// Full experiment under `out`: `data/`, `results/<method>/` and `report/`.
pub fn pipeline(config: &RunConfig, out: &Path, sweep: bool) -> Result<()> {
    if config.methods.is_empty() {
        bail!("no methods configured");
    }
    commands::create_dir(out)?;
    config.write_copy(out)?;
    let data = out.join("data");
    let results = out.join("results");
    commands::generate(config, &data)?;
    for &method in &config.methods {
        let mut run_config = config.clone();
        if sweep {
            let dir = out.join("sweeps").join(method.to_string());
            run_config.train.lr = commands::sweep(config, &data, method, config.search.trials, &dir)?;
        }
        commands::train(&run_config, &data, method, &results.join(method.to_string()))?;
    }
    commands::evaluate(config, &data, &results, "test")?;
    finish_report(&results, &["test".to_string()], &out.join("report"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_line_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn infer_takes_exactly_one_input() {
        assert!(Cli::try_parse_from(["weseg", "infer", "--checkpoint", "c.txt"]).is_err());
        assert!(Cli::try_parse_from(["weseg", "infer", "--checkpoint", "c", "--manifest", "m", "--image", "i"]).is_err());
        let cli = Cli::try_parse_from(["weseg", "--seed", "4", "infer", "--checkpoint", "c", "--image", "i"]).unwrap();
        assert_eq!(cli.global.seed, Some(4));
    }

    #[test]
    fn methods_parse_from_their_names() {
        let cli = Cli::try_parse_from(["weseg", "train", "--data", "d", "--method", "alphabeta-75-0"]).unwrap();
        let Command::Train { method, .. } = cli.command else { panic!("not train") };
        assert_eq!(method, Method::AlphaBeta { alpha: 75.0, beta: 0.0 });
        assert!(Cli::try_parse_from(["weseg", "train", "--data", "d", "--method", "resnet"]).is_err());
    }
}
