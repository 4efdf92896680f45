use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tokprune_core::config::load_config;
use tokprune_core::diagnostics::diagnostics_csv;
use tokprune_core::flops::reference_scenario;
use tokprune_core::pipeline::{Pipeline, ProbeReport};
use tokprune_core::report::to_canonical_json;
use tokprune_core::trace::RetentionMode;
use tokprune_core::{PruneError, Result};

/// Overrides the directory reports are written to when `--out` is absent.
const REPORT_DIR_ENV: &str = "TOKPRUNE_REPORT_DIR";

#[derive(Parser)]
#[command(name = "tokprune", version, about = "Three-stage visual token pruning over toy multi-encoder models")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Report path. Defaults to stdout unless a report directory is set.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the stage-3 retention mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Fixed,
    Adaptive,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate per-block feature ranks of every encoder.
    Probe,
    /// Run all three pruning stages and write the full report.
    Run {
        /// Rank profile written by `probe`; probing runs inline otherwise.
        #[arg(long)]
        probe: Option<PathBuf>,
    },
    /// Attention entropy and top-k stability per encoder block.
    Diag {
        /// Also write the per-block table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fit per-layer lambda to the configured mean retained counts.
    Calibrate,
    /// Cost of the configured run, plus the large-model reference scenario.
    Flops {
        /// Text tokens assumed by the reference scenario.
        #[arg(long, default_value_t = 64)]
        reference_text_tokens: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| PruneError::InvalidConfig("--config is required".into()))?;
    let mut config = load_config(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(mode) = cli.mode {
        config.stage3.mode = match mode {
            Mode::Fixed => RetentionMode::Fixed,
            Mode::Adaptive => RetentionMode::Adaptive,
        };
    }
    let report_dir = std::env::var_os(REPORT_DIR_ENV)
        .map(PathBuf::from)
        .or_else(|| config.report_dir.clone());
    let out = Output {
        path: cli.out,
        dir: report_dir,
    };
    let pipeline = Pipeline::new(config)?;
    match cli.command {
        Command::Probe => out.write("probe", &to_canonical_json(&pipeline.probe_report()?)?),
        Command::Run { probe } => {
            let profile = match probe {
                Some(p) => {
                    let text = fs::read_to_string(&p)?;
                    let report: ProbeReport = serde_json::from_str(&text)
                        .map_err(|e| PruneError::CorruptFile(format!("{}: {e}", p.display())))?;
                    Some(report.profile)
                }
                None => None,
            };
            let report = pipeline.run(profile)?;
            for e in &report.trace.entries {
                for w in &e.warnings {
                    eprintln!("warning: {w}");
                }
            }
            out.write("run", &to_canonical_json(&report)?)
        }
        Command::Diag { csv } => {
            let report = pipeline.diagnose()?;
            if let Some(p) = csv {
                fs::write(p, diagnostics_csv(&report.encoders))?;
            }
            out.write("diag", &to_canonical_json(&report)?)
        }
        Command::Calibrate => {
            let plan = pipeline.plan(&pipeline.probe()?)?;
            let report = pipeline.calibrate(&plan)?;
            let lambdas: Vec<String> = report.lambdas.iter().map(|l| format!("{l:?}")).collect();
            eprintln!("lambdas = [{}]", lambdas.join(", "));
            out.write("calibrate", &to_canonical_json(&report)?)
        }
        Command::Flops { reference_text_tokens } => {
            let report = pipeline.run(None)?;
            let (model, profile) = reference_scenario(reference_text_tokens);
            let reference = model.report(&profile)?;
            eprintln!("configured run\n{}\n\nreference scenario\n{}", report.cost, reference);
            let both = serde_json::json!({ "configured": report.cost, "reference": reference });
            out.write("flops", &to_canonical_json(&both)?)
        }
    }
}

struct Output {
    path: Option<PathBuf>,
    dir: Option<PathBuf>,
}

impl Output {
    fn write(&self, name: &str, text: &str) -> Result<()> {
        let target = match (&self.path, &self.dir) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(d)) => {
                fs::create_dir_all(d)?;
                Some(d.join(format!("{name}.json")))
            }
            (None, None) => None,
        };
        match target {
            Some(p) => write_file(&p, text),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}
