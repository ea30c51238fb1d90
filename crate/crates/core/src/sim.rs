//! Plan evaluation against the device models: per-stage latency
//! composition, energy accumulation, and gain reporting.
//!
//! Stages execute sequentially in topological order; parallelism exists
//! only inside a channel-split stage, where the FPGA path (compute plus
//! partial-result transfer) overlaps the GPU path and the stage takes the
//! max of the two. Feature maps live in GPU-side memory: every FPGA-mapped
//! group pays one inbound and one outbound transfer, so fusing a chain
//! eliminates the round trips its intermediates would otherwise make.

use crate::cost::{fpga_segment_cost, gpu_cost, link_cost, CostError, DeviceModels};
use crate::graph::{mac_count, ModelGraph, TensorShape};
use crate::plan::{PartitionDecision, PartitionPlan, PlanError};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("plan is infeasible: uses {macs} multipliers and {memory} memory bytes against budgets {mac_budget} and {memory_budget}")]
    InfeasiblePlan {
        macs: u64,
        memory: u64,
        mac_budget: u64,
        memory_budget: u64,
    },
    #[error("cannot compare reports with nonpositive totals")]
    ZeroTotals,
}

/// How a stage maps onto the devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    Gpu,
    Fpga,
    ParallelSplit,
    SequentialOffload,
    FusedSegment,
}

impl fmt::Display for StageMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StageMode::Gpu => "gpu",
            StageMode::Fpga => "fpga",
            StageMode::ParallelSplit => "parallel_split",
            StageMode::SequentialOffload => "sequential_offload",
            StageMode::FusedSegment => "fused_segment",
        };
        write!(f, "{s}")
    }
}

/// Compute-side latency composition for a stage: pure modes return their
/// own device latency, a parallel split hides the shorter path behind the
/// longer, a sequential offload chains all three terms. For fused segments
/// `fpga_s` carries the whole pipeline latency.
pub fn stage_latency(mode: StageMode, gpu_s: f64, fpga_s: f64, comm_s: f64) -> f64 {
    match mode {
        StageMode::Gpu => gpu_s,
        StageMode::Fpga => fpga_s,
        StageMode::ParallelSplit => gpu_s.max(fpga_s + comm_s),
        StageMode::SequentialOffload => gpu_s + comm_s + fpga_s,
        StageMode::FusedSegment => fpga_s,
    }
}

/// Cost breakdown of one schedule stage.
///
/// `stage_latency_s` composes the fields per mode: `parallel_split` is
/// `max(gpu, fpga + comm)`, `sequential_offload` is `gpu + comm + fpga`,
/// and FPGA-resident stages (`fpga`, `fused_segment`) add their inbound
/// and outbound transfer time (`comm_latency_s`) to the pipeline latency.
/// Energy is always a sum, never a max.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub stage_id: String,
    pub mode: StageMode,
    pub gpu_latency_s: f64,
    pub fpga_latency_s: f64,
    pub comm_latency_s: f64,
    pub stage_latency_s: f64,
    pub energy_j: f64,
    pub bytes_transferred: u64,
}

/// Totals of the report this one is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineTotals {
    pub total_latency_s: f64,
    pub total_energy_j: f64,
}

/// Gain factors versus a baseline, in the baseline-over-candidate sense:
/// values above 1.0 mean the candidate wins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub energy_gain: f64,
    pub speedup: f64,
}

/// Simulated cost of a plan: per-stage breakdown plus totals, optionally
/// annotated with GPU-only baseline figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub workload: String,
    pub stages: Vec<StageCost>,
    pub total_latency_s: f64,
    pub total_energy_j: f64,
    pub total_bytes_transferred: u64,
    pub baseline: Option<BaselineTotals>,
    pub energy_gain: Option<f64>,
    pub speedup: Option<f64>,
}

impl CostReport {
    /// Record baseline totals and the derived gain factors.
    pub fn attach_baseline(&mut self, baseline: &CostReport) -> Result<(), SimError> {
        let gains = compare(self, baseline)?;
        self.baseline = Some(BaselineTotals {
            total_latency_s: baseline.total_latency_s,
            total_energy_j: baseline.total_energy_j,
        });
        self.energy_gain = Some(gains.energy_gain);
        self.speedup = Some(gains.speedup);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Flat per-stage table for plotting.
    pub fn stage_table_csv(&self) -> String {
        let mut out = String::from(
            "stage_id,mode,gpu_latency_s,fpga_latency_s,comm_latency_s,stage_latency_s,energy_j,bytes_transferred\n",
        );
        for s in &self.stages {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.stage_id,
                s.mode,
                s.gpu_latency_s,
                s.fpga_latency_s,
                s.comm_latency_s,
                s.stage_latency_s,
                s.energy_j,
                s.bytes_transferred
            ));
        }
        out
    }
}

/// Transfer accounting knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SimOptions {
    /// Transfer channel-split partials at full 32-bit accumulator width
    /// instead of requantized 8-bit elements.
    pub exact_split_transfers: bool,
}

impl SimOptions {
    pub fn split_element_bytes(&self) -> u64 {
        if self.exact_split_transfers {
            4
        } else {
            1
        }
    }
}

fn shape_with_channels(shape: TensorShape, c: usize) -> TensorShape {
    TensorShape { h: shape.h, w: shape.w, c }
}

/// Evaluate a plan stage by stage. Fails on structurally invalid or
/// budget-infeasible plans and on calibration gaps.
pub fn simulate(
    graph: &ModelGraph,
    plan: &PartitionPlan,
    models: &DeviceModels,
    options: SimOptions,
) -> Result<CostReport, SimError> {
    let validation = crate::plan::validate_plan(graph, plan, &models.fpga)?;
    if !validation.feasible {
        return Err(SimError::InfeasiblePlan {
            macs: validation.usage.macs,
            memory: validation.usage.memory_bytes(),
            mac_budget: models.fpga.mac_budget,
            memory_budget: models.fpga.memory_budget_bytes,
        });
    }
    let decisions = plan.decisions_by_index(graph)?;

    let mut stages: Vec<StageCost> = Vec::new();
    let mut consumed = vec![false; graph.len()];
    for idx in 0..graph.len() {
        if consumed[idx] {
            continue;
        }
        consumed[idx] = true;
        let node = &graph.nodes()[idx];
        let in_shape = graph.node_input_shape(idx).expect("shapes inferred");
        let out_shape = graph.output_shape(idx).expect("shapes inferred");

        let stage = match decisions[idx] {
            PartitionDecision::GpuOnly => {
                let cost = gpu_cost(&node.spec, in_shape, &models.gpu)?;
                StageCost {
                    stage_id: node.id.clone(),
                    mode: StageMode::Gpu,
                    gpu_latency_s: cost.latency_s,
                    fpga_latency_s: 0.0,
                    comm_latency_s: 0.0,
                    stage_latency_s: stage_latency(StageMode::Gpu, cost.latency_s, 0.0, 0.0),
                    energy_j: cost.energy_j,
                    bytes_transferred: 0,
                }
            }
            PartitionDecision::FpgaWhole { group } => {
                // collect the whole fused chain (validated contiguous)
                let mut members = vec![idx];
                for j in idx + 1..graph.len() {
                    if decisions[j] == (PartitionDecision::FpgaWhole { group }) {
                        consumed[j] = true;
                        members.push(j);
                    }
                }
                fused_segment_stage(graph, &members, models)
            }
            PartitionDecision::ChannelSplit { g } => {
                let gpu_side = gpu_cost(
                    &node.spec,
                    shape_with_channels(in_shape, in_shape.c - g),
                    &models.gpu,
                )?;
                let slice_macs = mac_count(&node.spec, shape_with_channels(in_shape, g));
                let fpga_side =
                    fpga_segment_cost(shape_with_channels(in_shape, g), 1, slice_macs, &models.fpga);
                let partial_bytes =
                    (out_shape.h * out_shape.w * out_shape.c) as u64 * options.split_element_bytes();
                let comm = link_cost(partial_bytes, &models.link);
                let lat = stage_latency(
                    StageMode::ParallelSplit,
                    gpu_side.latency_s,
                    fpga_side.latency_s,
                    comm.latency_s,
                );
                StageCost {
                    stage_id: node.id.clone(),
                    mode: StageMode::ParallelSplit,
                    gpu_latency_s: gpu_side.latency_s,
                    fpga_latency_s: fpga_side.latency_s,
                    comm_latency_s: comm.latency_s,
                    stage_latency_s: lat,
                    energy_j: gpu_side.energy_j + fpga_side.energy_j + comm.energy_j,
                    bytes_transferred: partial_bytes,
                }
            }
            PartitionDecision::DwSplit => {
                // validated: this is the depthwise half and its sole
                // consumer is the paired pointwise layer
                let pw_idx = graph.consumers(idx)[0];
                consumed[pw_idx] = true;
                let pw = &graph.nodes()[pw_idx];
                let gpu_side = gpu_cost(&node.spec, in_shape, &models.gpu)?;
                let inter_bytes = out_shape.byte_size();
                let comm_in = link_cost(inter_bytes, &models.link);
                let pw_out = graph.output_shape(pw_idx).expect("shapes inferred");
                let fpga_side =
                    fpga_segment_cost(out_shape, 1, mac_count(&pw.spec, out_shape), &models.fpga);
                let comm_out = link_cost(pw_out.byte_size(), &models.link);
                let comm_total = comm_in.latency_s + comm_out.latency_s;
                StageCost {
                    stage_id: format!("{}+{}", node.id, pw.id),
                    mode: StageMode::SequentialOffload,
                    gpu_latency_s: gpu_side.latency_s,
                    fpga_latency_s: fpga_side.latency_s,
                    comm_latency_s: comm_total,
                    stage_latency_s: stage_latency(
                        StageMode::SequentialOffload,
                        gpu_side.latency_s,
                        fpga_side.latency_s,
                        comm_total,
                    ),
                    energy_j: gpu_side.energy_j
                        + fpga_side.energy_j
                        + comm_in.energy_j
                        + comm_out.energy_j,
                    bytes_transferred: inter_bytes + pw_out.byte_size(),
                }
            }
        };
        stages.push(stage);
    }

    let total_latency_s = stages.iter().map(|s| s.stage_latency_s).sum();
    let total_energy_j = stages.iter().map(|s| s.energy_j).sum();
    let total_bytes_transferred = stages.iter().map(|s| s.bytes_transferred).sum();
    Ok(CostReport {
        workload: graph.name.clone(),
        stages,
        total_latency_s,
        total_energy_j,
        total_bytes_transferred,
        baseline: None,
        energy_gain: None,
        speedup: None,
    })
}

/// Stage for a fused FPGA chain: one inbound transfer of the segment input,
/// a fill-plus-stream pipeline pass, one outbound transfer of the segment
/// output. Intermediate feature maps stay on chip and are not counted.
fn fused_segment_stage(graph: &ModelGraph, members: &[usize], models: &DeviceModels) -> StageCost {
    let head = members[0];
    let tail = *members.last().expect("nonempty segment");
    let in_bytes: u64 = graph.nodes()[head]
        .inputs
        .iter()
        .map(|p| graph.port_shape(*p).expect("shapes inferred").byte_size())
        .sum();
    let out_bytes = graph.output_shape(tail).expect("shapes inferred").byte_size();
    let input_shape = graph.node_input_shape(head).expect("shapes inferred");
    let total_macs: u64 = members
        .iter()
        .map(|&i| {
            let shape = graph.node_input_shape(i).expect("shapes inferred");
            mac_count(&graph.nodes()[i].spec, shape)
        })
        .sum();
    let pipe = fpga_segment_cost(input_shape, members.len() as u64, total_macs, &models.fpga);
    let comm_in = link_cost(in_bytes, &models.link);
    let comm_out = link_cost(out_bytes, &models.link);
    let mode = if members.len() > 1 {
        StageMode::FusedSegment
    } else {
        StageMode::Fpga
    };
    let ids: Vec<&str> = members.iter().map(|&i| graph.nodes()[i].id.as_str()).collect();
    StageCost {
        stage_id: ids.join("+"),
        mode,
        gpu_latency_s: 0.0,
        fpga_latency_s: pipe.latency_s,
        comm_latency_s: comm_in.latency_s + comm_out.latency_s,
        stage_latency_s: comm_in.latency_s + pipe.latency_s + comm_out.latency_s,
        energy_j: pipe.energy_j + comm_in.energy_j + comm_out.energy_j,
        bytes_transferred: in_bytes + out_bytes,
    }
}

/// Simulate the all-GPU plan: the homogeneous baseline with zero link
/// traffic.
pub fn baseline_gpu_only(graph: &ModelGraph, models: &DeviceModels) -> Result<CostReport, SimError> {
    let plan = PartitionPlan::gpu_only(graph, crate::plan::Objective::Energy);
    simulate(graph, &plan, models, SimOptions::default())
}

/// Gain factors: baseline totals over candidate totals.
pub fn compare(report: &CostReport, baseline: &CostReport) -> Result<Gains, SimError> {
    if report.total_energy_j <= 0.0
        || report.total_latency_s <= 0.0
        || baseline.total_energy_j <= 0.0
        || baseline.total_latency_s <= 0.0
    {
        return Err(SimError::ZeroTotals);
    }
    Ok(Gains {
        energy_gain: baseline.total_energy_j / report.total_energy_j,
        speedup: baseline.total_latency_s / report.total_latency_s,
    })
}
