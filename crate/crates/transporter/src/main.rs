use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand as ClapSubcommand};
use transporter::commands::{execute, replay, CommandError, Subcommand};
use transporter::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "transporter", version, about = "Coupling, flow-matching and concept-steering experiments on toy worlds")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [default: $TRANSPORTER_OUT, then ./runs].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `dotted.key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(ClapSubcommand)]
enum Command {
    /// Train the coupling network.
    TrainCoupling,
    /// Train the flow-matching generator.
    TrainGenerator,
    /// Train one concept vector per configured pair.
    TrainConcepts,
    /// Steering sweep over deltas and seeds for one concept.
    Generate {
        /// `source:target`.
        #[arg(long)]
        pair: Option<String>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        deltas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Train and score every ablation arm, and time the transport forward pass.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        arms: Option<Vec<String>>,
    },
    /// Run oracle suites (all by default).
    Oracle { suites: Vec<String> },
    /// Rerun a manifest and check that its outputs are reproduced bit for bit.
    Replay { manifest: PathBuf },
}

fn run(cli: Cli) -> Result<bool, CommandError> {
    let c = cli.common;
    if let Command::Replay { manifest } = &cli.command {
        let r = replay(manifest, c.out)?;
        if r.mismatches.is_empty() {
            println!("reproduced {} outputs in {}", r.report.manifest.outputs.len(), r.report.out.display());
            return Ok(r.report.ok);
        }
        return Err(CommandError::Runtime(anyhow::anyhow!(
            "outputs differ from the manifest: {}",
            r.mismatches.join(", ")
        )));
    }
    let mut overrides = c.overrides;
    let cmd = match cli.command {
        Command::TrainCoupling => Subcommand::TrainCoupling,
        Command::TrainGenerator => Subcommand::TrainGenerator,
        Command::TrainConcepts => Subcommand::TrainConcepts,
        Command::Generate { pair, deltas, seeds } => {
            if let Some(p) = pair {
                let (s, t) = p
                    .split_once(':')
                    .ok_or_else(|| CommandError::Usage(format!("--pair `{p}` is not source:target")))?;
                overrides.push(format!("generate.pair=[{s:?}, {t:?}]"));
            }
            if let Some(d) = deltas {
                overrides.push(format!("generate.deltas={d:?}"));
            }
            if let Some(s) = seeds {
                overrides.push(format!("generate.seeds={s:?}"));
            }
            Subcommand::Generate
        }
        Command::Ablate { arms } => {
            if let Some(a) = arms {
                overrides.push(format!("ablate.arms={a:?}"));
            }
            Subcommand::Ablate
        }
        Command::Oracle { suites } => {
            if !suites.is_empty() {
                overrides.push(format!("oracle.suites={suites:?}"));
            }
            Subcommand::Oracle
        }
        Command::Replay { .. } => unreachable!("handled above"),
    };
    let mut cfg = ExperimentConfig::load(c.config.as_deref(), &overrides)?;
    if let Some(seed) = c.seed {
        cfg.apply_seed(seed);
    }
    cfg.resolve_out(c.out).map_err(|e| CommandError::Runtime(e.into()))?;
    let report = execute(cmd, cfg)?;
    println!("wrote {} outputs to {}", report.manifest.outputs.len(), report.out.display());
    Ok(report.ok)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
