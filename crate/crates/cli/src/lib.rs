//! Command implementations behind the `hetplan` binary: configuration
//! ingestion, planning, simulation, functional verification and gain-table
//! emission. The binary is a thin argument-parsing shell over these
//! functions so tests can drive them directly.

use anyhow::{bail, Context, Result};
use hetplan_core::cost::{load_calibration, load_device_config, DeviceModels};
use hetplan_core::exec::{execute_graph_trace, execute_plan_trace};
use hetplan_core::model_file::parse_model;
use hetplan_core::plan::{validate_plan, Objective, PartitionDecision, PartitionPlan};
use hetplan_core::planner::{optimize, PlannerOptions};
use hetplan_core::sim::{baseline_gpu_only, compare, simulate, CostReport, Gains, SimOptions};
use hetplan_core::synth::{random_tensor, random_weights, DEFAULT_FRACTION_BITS};
use hetplan_core::templates::builtin_module;
use hetplan_core::ModelGraph;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Calibration used when no `--calibration` file is given: the shipped
/// fpga-favorable synthetic fixture.
pub const DEFAULT_CALIBRATION: &str =
    include_str!("../../../fixtures/calibration/fpga_favorable.csv");

/// Resolve `--model`: either `builtin:<name>[:k=v,...]` or a model file
/// path. File-based models take their name from the file stem unless the
/// document names itself.
pub fn load_model(source: &str) -> Result<ModelGraph> {
    if let Some(rest) = source.strip_prefix("builtin:") {
        let (name, overrides) = match rest.split_once(':') {
            Some((n, o)) => (n, o),
            None => (rest, ""),
        };
        return builtin_module(name, overrides)
            .with_context(|| format!("building builtin model '{name}'"));
    }
    let path = Path::new(source);
    let text =
        fs::read_to_string(path).with_context(|| format!("reading model file {}", path.display()))?;
    let mut graph =
        parse_model(&text).with_context(|| format!("parsing model file {}", path.display()))?;
    if graph.name == "model" {
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            graph.name = stem.to_string();
        }
    }
    Ok(graph)
}

/// Load the FPGA/link config and GPU calibration, falling back to built-in
/// defaults where no file is given.
pub fn load_device_models(
    device_config: Option<&Path>,
    calibration: Option<&Path>,
) -> Result<DeviceModels> {
    let config = match device_config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading device config {}", path.display()))?;
            load_device_config(&text)
                .with_context(|| format!("parsing device config {}", path.display()))?
        }
        None => Default::default(),
    };
    let gpu = match calibration {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading calibration file {}", path.display()))?;
            load_calibration(&text)
                .with_context(|| format!("parsing calibration file {}", path.display()))?
        }
        None => load_calibration(DEFAULT_CALIBRATION).expect("embedded calibration is valid"),
    };
    Ok(DeviceModels {
        fpga: config.fpga,
        gpu,
        link: config.link,
    })
}

#[derive(Debug, Clone)]
pub struct PlanRequest {
    pub model: String,
    pub device_config: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub objective: Objective,
    pub beam_width: usize,
    pub g_grid: Vec<usize>,
    pub exact_transfers: bool,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub graph: ModelGraph,
    pub plan: PartitionPlan,
    pub report: CostReport,
    pub baseline: CostReport,
    pub gains: Gains,
}

fn planner_options(req_beam: usize, g_grid: &[usize], exact: bool) -> PlannerOptions {
    PlannerOptions {
        beam_width: req_beam,
        extra_g: g_grid.to_vec(),
        sim: SimOptions {
            exact_split_transfers: exact,
        },
        ..Default::default()
    }
}

/// Optimize a plan, simulate it against the GPU-only baseline, and write
/// the artifacts (plan.json, report.json, baseline.json, stages.csv,
/// gains.csv) when an output directory is given.
pub fn cmd_plan(req: &PlanRequest) -> Result<PlanOutcome> {
    let graph = load_model(&req.model)?;
    let models = load_device_models(req.device_config.as_deref(), req.calibration.as_deref())?;
    let options = planner_options(req.beam_width, &req.g_grid, req.exact_transfers);
    let plan = optimize(&graph, &models, req.objective, &options)
        .with_context(|| format!("planning '{}'", graph.name))?;
    let baseline = baseline_gpu_only(&graph, &models)?;
    let mut report = simulate(&graph, &plan, &models, options.sim)?;
    report.attach_baseline(&baseline)?;
    let gains = compare(&report, &baseline)?;

    if let Some(dir) = &req.out {
        write_plan_artifacts(dir, &plan, &report, &baseline, &gains)?;
    }
    Ok(PlanOutcome {
        graph,
        plan,
        report,
        baseline,
        gains,
    })
}

fn write_plan_artifacts(
    dir: &Path,
    plan: &PartitionPlan,
    report: &CostReport,
    baseline: &CostReport,
    gains: &Gains,
) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    let write = |name: &str, contents: &str| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    };
    write("plan.json", &plan.to_json())?;
    write("report.json", &report.to_json())?;
    write("baseline.json", &baseline.to_json())?;
    write("stages.csv", &report.stage_table_csv())?;
    write(
        "gains.csv",
        &format!(
            "workload,energy_gain,latency_speedup\n{},{},{}\n",
            report.workload, gains.energy_gain, gains.speedup
        ),
    )?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SimulateRequest {
    pub model: String,
    pub plan: PathBuf,
    pub device_config: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub exact_transfers: bool,
    pub out: Option<PathBuf>,
}

/// Re-simulate an existing plan document.
pub fn cmd_simulate(req: &SimulateRequest) -> Result<PlanOutcome> {
    let graph = load_model(&req.model)?;
    let models = load_device_models(req.device_config.as_deref(), req.calibration.as_deref())?;
    let text = fs::read_to_string(&req.plan)
        .with_context(|| format!("reading plan file {}", req.plan.display()))?;
    let plan = PartitionPlan::from_json(&text)
        .with_context(|| format!("parsing plan file {}", req.plan.display()))?;
    let options = SimOptions {
        exact_split_transfers: req.exact_transfers,
    };
    let baseline = baseline_gpu_only(&graph, &models)?;
    let mut report = simulate(&graph, &plan, &models, options)?;
    report.attach_baseline(&baseline)?;
    let gains = compare(&report, &baseline)?;
    if let Some(dir) = &req.out {
        write_plan_artifacts(dir, &plan, &report, &baseline, &gains)?;
    }
    Ok(PlanOutcome {
        graph,
        plan,
        report,
        baseline,
        gains,
    })
}

#[derive(Debug, Clone)]
pub struct VerifyRequest {
    pub model: String,
    pub plan: Option<PathBuf>,
    pub device_config: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub objective: Objective,
    pub seed: u64,
    pub trials: usize,
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub trial: usize,
    pub layer: String,
    pub element: usize,
}

#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub trials: usize,
    pub first_mismatch: Option<Mismatch>,
    pub transcript: String,
}

impl VerifyOutcome {
    pub fn passed(&self) -> bool {
        self.first_mismatch.is_none()
    }
}

/// Run the partitioned and unpartitioned engines on seeded random
/// inputs/weights and compare every layer output bit for bit.
pub fn cmd_verify(req: &VerifyRequest) -> Result<VerifyOutcome> {
    let graph = load_model(&req.model)?;
    let models = load_device_models(req.device_config.as_deref(), req.calibration.as_deref())?;
    let plan = match &req.plan {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading plan file {}", path.display()))?;
            PartitionPlan::from_json(&text)
                .with_context(|| format!("parsing plan file {}", path.display()))?
        }
        None => optimize(&graph, &models, req.objective, &PlannerOptions::default())?,
    };
    // surface invalid hand-written plans before any execution
    validate_plan(&graph, &plan, &models.fpga)
        .with_context(|| "validating plan against the model graph")?;

    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut transcript = String::new();
    let mut first_mismatch = None;
    for trial in 0..req.trials {
        let input = random_tensor(&mut rng, graph.input_shape, DEFAULT_FRACTION_BITS);
        let weights = random_weights(&mut rng, &graph, DEFAULT_FRACTION_BITS);
        let reference = execute_graph_trace(&graph, &input, &weights)?;
        let partitioned = execute_plan_trace(&graph, &plan, &input, &weights)?;
        let mut trial_mismatch = None;
        'nodes: for (idx, (a, b)) in reference.iter().zip(&partitioned).enumerate() {
            if a != b {
                let element = a
                    .values()
                    .iter()
                    .zip(b.values())
                    .position(|(x, y)| x != y)
                    .unwrap_or(0);
                trial_mismatch = Some(Mismatch {
                    trial,
                    layer: graph.nodes()[idx].id.clone(),
                    element,
                });
                break 'nodes;
            }
        }
        match &trial_mismatch {
            None => {
                let _ = writeln!(transcript, "trial {trial:03}: OK ({} layers bit-exact)", graph.len());
            }
            Some(m) => {
                let _ = writeln!(
                    transcript,
                    "trial {trial:03}: MISMATCH at layer '{}' element {}",
                    m.layer, m.element
                );
                if first_mismatch.is_none() {
                    first_mismatch = trial_mismatch;
                }
            }
        }
    }
    Ok(VerifyOutcome {
        trials: req.trials,
        first_mismatch,
        transcript,
    })
}

#[derive(Debug, Clone)]
pub struct ReportRequest {
    /// (report, baseline) file pairs.
    pub pairs: Vec<(PathBuf, PathBuf)>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct GainRow {
    pub workload: String,
    pub energy_gain: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone)]
pub struct GainTable {
    pub rows: Vec<GainRow>,
}

impl GainTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("workload,energy_gain,latency_speedup\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.workload, r.energy_gain, r.speedup);
        }
        out
    }

    /// Human-readable comparison rows in the `1.34x` style.
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.workload.len())
            .chain(["workload".len()])
            .max()
            .unwrap_or(8);
        let mut out = format!("{:<width$}  energy gain  latency speedup\n", "workload");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>11}  {:>15}",
                r.workload,
                format!("{:.2}x", r.energy_gain),
                format!("{:.2}x", r.speedup),
            );
        }
        out
    }
}

fn load_report(path: &Path) -> Result<CostReport> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading report {}", path.display()))?;
    CostReport::from_json(&text).with_context(|| format!("parsing report {}", path.display()))
}

/// Build the gain comparison table from (report, baseline) pairs.
pub fn cmd_report(req: &ReportRequest) -> Result<GainTable> {
    if req.pairs.is_empty() {
        bail!("need at least one (report, baseline) pair");
    }
    let mut rows = Vec::with_capacity(req.pairs.len());
    for (report_path, baseline_path) in &req.pairs {
        let report = load_report(report_path)?;
        let baseline = load_report(baseline_path)?;
        if report.workload != baseline.workload {
            bail!(
                "workload mismatch: {} reports '{}' but {} reports '{}'",
                report_path.display(),
                report.workload,
                baseline_path.display(),
                baseline.workload
            );
        }
        let gains = compare(&report, &baseline).with_context(|| {
            format!(
                "comparing {} against {}",
                report_path.display(),
                baseline_path.display()
            )
        })?;
        rows.push(GainRow {
            workload: report.workload,
            energy_gain: gains.energy_gain,
            speedup: gains.speedup,
        });
    }
    let table = GainTable { rows };
    if let Some(path) = &req.out {
        fs::write(path, table.to_csv())
            .with_context(|| format!("writing gain table {}", path.display()))?;
    }
    Ok(table)
}

/// Render a plan outcome for the terminal.
pub fn render_plan_summary(outcome: &PlanOutcome) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "workload: {}", outcome.graph.name);
    for d in &outcome.plan.decisions {
        let desc = match d.decision {
            PartitionDecision::GpuOnly => "gpu".to_string(),
            PartitionDecision::FpgaWhole { group } => format!("fpga (fused group {group})"),
            PartitionDecision::ChannelSplit { g } => format!("channel split (g={g})"),
            PartitionDecision::DwSplit => "dw split (gpu depthwise + fpga pointwise)".to_string(),
        };
        let _ = writeln!(out, "  {:<12} -> {}", d.layer, desc);
    }
    let usage = outcome.plan.resource_usage;
    let _ = writeln!(
        out,
        "fpga usage: {} multipliers, {} memory bytes",
        usage.macs,
        usage.memory_bytes()
    );
    let _ = writeln!(
        out,
        "latency: {:.3} ms (baseline {:.3} ms, speedup {:.2}x)",
        outcome.report.total_latency_s * 1e3,
        outcome.baseline.total_latency_s * 1e3,
        outcome.gains.speedup
    );
    let _ = writeln!(
        out,
        "energy:  {:.3} mJ (baseline {:.3} mJ, gain {:.2}x)",
        outcome.report.total_energy_j * 1e3,
        outcome.baseline.total_energy_j * 1e3,
        outcome.gains.energy_gain
    );
    out
}
