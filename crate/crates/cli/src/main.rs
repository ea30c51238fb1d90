use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use hetplan_cli::{
    cmd_plan, cmd_report, cmd_simulate, cmd_verify, render_plan_summary, PlanRequest,
    ReportRequest, SimulateRequest, VerifyRequest,
};
use hetplan_core::plan::Objective;
use std::path::PathBuf;
use std::process::ExitCode;

/// Heterogeneous FPGA-GPU partition planner and cost simulator for
/// quantized mobile-CNN inference.
#[derive(Parser)]
#[command(name = "hetplan", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// Model source: `builtin:<name>[:k=v,...]` or a model file path.
    /// Builtins: fire, bottleneck, shufflenet_unit, shufflenet_unit_down.
    #[arg(long)]
    model: String,
    /// Device config file (TOML with `[fpga]` and `[link]` tables). Defaults apply
    /// when omitted.
    #[arg(long)]
    device_config: Option<PathBuf>,
    /// GPU calibration CSV. Omitting it uses the shipped fpga-favorable
    /// synthetic fixture.
    #[arg(long)]
    calibration: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Search for the minimum-cost partition plan and report its gains
    /// over the GPU-only baseline.
    Plan {
        #[command(flatten)]
        model: ModelArgs,
        /// Optimization target: latency, energy or `weighted:<alpha>`.
        #[arg(long, default_value = "energy")]
        objective: Objective,
        /// Beam width used beyond the exhaustive search limit.
        #[arg(long, default_value_t = 32)]
        beam_width: usize,
        /// Extra channel-split g values (comma separated) merged into the
        /// default grid.
        #[arg(long, value_delimiter = ',')]
        g_grid: Vec<usize>,
        /// Count split partial transfers at full 32-bit accumulator width.
        #[arg(long)]
        exact_transfers: bool,
        /// Directory for plan.json, report.json, baseline.json,
        /// stages.csv and gains.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-simulate an existing plan document.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        /// Plan document produced by `plan`.
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        exact_transfers: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prove a plan computes bit-identical results to the unpartitioned
    /// graph on seeded random inputs and weights.
    Verify {
        #[command(flatten)]
        model: ModelArgs,
        /// Plan document to verify; omitted, a plan is optimized in-process.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Objective for in-process planning.
        #[arg(long, default_value = "energy")]
        objective: Objective,
        /// RNG seed for inputs and weights.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of random trials.
        #[arg(long, default_value_t = 32)]
        trials: usize,
    },
    /// Emit a gain comparison table from (report, baseline) file pairs.
    Report {
        /// Alternating report and baseline paths: r1 b1 [r2 b2 ...].
        #[arg(required = true, num_args = 2..)]
        files: Vec<PathBuf>,
        /// CSV output path for the table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Plan {
            model,
            objective,
            beam_width,
            g_grid,
            exact_transfers,
            out,
        } => {
            let outcome = cmd_plan(&PlanRequest {
                model: model.model,
                device_config: model.device_config,
                calibration: model.calibration,
                objective,
                beam_width,
                g_grid,
                exact_transfers,
                out: out.clone(),
            })?;
            print!("{}", render_plan_summary(&outcome));
            if let Some(dir) = out {
                println!("artifacts written to {}", dir.display());
            }
            Ok(true)
        }
        Command::Simulate {
            model,
            plan,
            exact_transfers,
            out,
        } => {
            let outcome = cmd_simulate(&SimulateRequest {
                model: model.model,
                plan,
                device_config: model.device_config,
                calibration: model.calibration,
                exact_transfers,
                out: out.clone(),
            })?;
            print!("{}", render_plan_summary(&outcome));
            if let Some(dir) = out {
                println!("artifacts written to {}", dir.display());
            }
            Ok(true)
        }
        Command::Verify {
            model,
            plan,
            objective,
            seed,
            trials,
        } => {
            let outcome = cmd_verify(&VerifyRequest {
                model: model.model,
                plan,
                device_config: model.device_config,
                calibration: model.calibration,
                objective,
                seed,
                trials,
            })?;
            print!("{}", outcome.transcript);
            match &outcome.first_mismatch {
                None => {
                    println!("PASS: {} trials bit-exact", outcome.trials);
                    Ok(true)
                }
                Some(m) => {
                    eprintln!(
                        "FAIL: trial {} diverged at layer '{}', element {}",
                        m.trial, m.layer, m.element
                    );
                    Ok(false)
                }
            }
        }
        Command::Report { files, out } => {
            if files.len() % 2 != 0 {
                anyhow::bail!("report takes (report, baseline) pairs; got {} paths", files.len());
            }
            let pairs = files.chunks(2).map(|c| (c[0].clone(), c[1].clone())).collect();
            let table = cmd_report(&ReportRequest { pairs, out })?;
            print!("{}", table.to_text());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
