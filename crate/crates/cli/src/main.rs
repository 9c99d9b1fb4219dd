use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pfgl_core::federation::Mode;
use pfgl_core::runner::{
    emit_plot_data, load_report, prepare_data, run_experiment, write_prepared, ExperimentConfig, ExperimentReport,
    Overrides,
};
use pfgl_core::threats::AttackKind;

/// Federated probabilistic charging-demand forecasting experiments.
///
/// Log verbosity is read from `PFGL_LOG` (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "pfgl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Discretize sessions (or generate synthetic ones) and write the panel and graph.
    Prepare(Common),
    /// Train and evaluate every configured cell.
    Run(Common),
    /// Run `0..=N` malicious clients (or the configured counts) for each mode.
    AttackSweep(Common),
    /// Write plot series for the report found in `--out`.
    PlotData {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long, value_name = "N")]
    malicious: Option<usize>,
    #[arg(long)]
    attack: Option<AttackKind>,
    #[arg(long, value_name = "T")]
    rounds: Option<usize>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            seed: self.seed,
            mode: self.mode,
            malicious: self.malicious,
            attack: self.attack,
            rounds: self.rounds,
            out: self.out.clone(),
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

fn summarize(report: &ExperimentReport) {
    println!("{:<14} {:>9} {:>9} {:>9} {:>9}", "cell", "QS", "honestQS", "MIL", "ICP");
    for c in &report.cells {
        let honest = c.honest_qs.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<14} {:>9.4} {:>9} {:>9.4} {:>9.4}",
            c.label, c.avg_qs, honest, c.avg_mil, c.avg_icp
        );
    }
    println!("results in {}", report.config.output_dir.display());
}

fn plot(out: &Path) -> Result<()> {
    let report = load_report(out).with_context(|| format!("loading report from {}", out.display()))?;
    let files = emit_plot_data(&report, &out.join("plot"))?;
    println!(
        "wrote {} loss, {} lambda, {} heatmap and {} forecast files to {}",
        files.loss.len(),
        files.lambda.len(),
        files.heatmap.len(),
        files.forecast.len(),
        out.join("plot").display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(c) => {
            let cfg = c.load()?;
            let prepared = prepare_data(&cfg)?;
            let dir = cfg.output_dir.join("data");
            write_prepared(&prepared, &dir)?;
            println!(
                "{} stations, {} slots of {} min -> {}",
                prepared.panel.num_stations(),
                prepared.panel.num_slots(),
                prepared.panel.interval_minutes,
                dir.display()
            );
        }
        Command::Run(c) => summarize(&run_experiment(&c.load()?)?),
        Command::AttackSweep(c) => {
            let mut cfg = c.load()?;
            if let Some(n) = c.malicious {
                cfg.attacks.malicious = (0..=n).collect();
            }
            if cfg.attacks.kind == AttackKind::None {
                if c.attack.is_some() {
                    bail!("attack-sweep needs an attack kind other than none");
                }
                cfg.attacks.kind = AttackKind::Flipping;
            }
            cfg.validate()?;
            summarize(&run_experiment(&cfg)?);
        }
        Command::PlotData { out } => plot(&out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("PFGL_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
