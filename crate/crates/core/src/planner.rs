//! Minimum-cost plan search over per-layer candidate decisions.
//!
//! Search is exhaustive branch-and-bound (feasibility pruning plus an
//! admissible per-node lower bound) up to a configurable number of decision
//! points, and deterministic beam search beyond. Candidate plans are scored
//! by full simulation; adjacent FPGA-mapped layers are always fused into
//! maximal contiguous chains, which under the stage model never costs more
//! than leaving them unfused.
//!
//! Ties break deterministically: lower energy, then lower latency, then
//! fewer nodes mapped whole onto the FPGA, then the lexicographically
//! smallest decision vector in topological order.

use crate::cost::{fpga_segment_cost, gpu_cost, link_cost, DeviceModels, FpgaResources};
use crate::graph::{mac_count, ModelGraph, PortRef, TensorShape};
use crate::plan::{
    decision_resources, enumerate_candidates, LayerDecision, Objective, PartitionDecision,
    PartitionPlan,
};
use crate::sim::{baseline_gpu_only, simulate, CostReport, SimError, SimOptions};

/// Search configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerOptions {
    /// Beam width once the exhaustive limit is exceeded.
    pub beam_width: usize,
    /// Maximum decision points handled by exhaustive branch-and-bound.
    pub exhaustive_limit: usize,
    /// Extra channel-split g values merged into the default grid.
    pub extra_g: Vec<usize>,
    pub sim: SimOptions,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        Self {
            beam_width: 32,
            exhaustive_limit: 16,
            extra_g: Vec::new(),
            sim: SimOptions::default(),
        }
    }
}

/// Full comparison key for a candidate plan.
#[derive(Debug, Clone, PartialEq)]
struct PlanKey {
    score: f64,
    energy: f64,
    latency: f64,
    /// Count of FpgaWhole decisions.
    fpga_nodes: usize,
    ranks: Vec<(u8, u64)>,
}

impl PlanKey {
    fn better_than(&self, other: &PlanKey) -> bool {
        self.score
            .total_cmp(&other.score)
            .then(self.energy.total_cmp(&other.energy))
            .then(self.latency.total_cmp(&other.latency))
            .then(self.fpga_nodes.cmp(&other.fpga_nodes))
            .then(self.ranks.cmp(&other.ranks))
            .is_lt()
    }
}

struct SearchContext<'a> {
    graph: &'a ModelGraph,
    models: &'a DeviceModels,
    objective: Objective,
    options: &'a PlannerOptions,
    candidates: Vec<Vec<PartitionDecision>>,
    /// Admissible per-candidate objective contribution, parallel to
    /// `candidates`.
    bounds: Vec<Vec<f64>>,
    /// `suffix_min[i]` = sum over nodes >= i of their cheapest possible
    /// contribution.
    suffix_min: Vec<f64>,
    /// Paired pointwise index for each depthwise node offering DwSplit.
    pair_target: Vec<Option<usize>>,
    base_latency: f64,
    base_energy: f64,
}

impl SearchContext<'_> {
    fn scalarize(&self, latency_s: f64, energy_j: f64) -> f64 {
        match self.objective {
            Objective::Latency => latency_s,
            Objective::Energy => energy_j,
            Objective::Weighted { alpha } => {
                alpha * latency_s / self.base_latency + (1.0 - alpha) * energy_j / self.base_energy
            }
        }
    }

    fn report_score(&self, report: &CostReport) -> f64 {
        self.scalarize(report.total_latency_s, report.total_energy_j)
    }

    /// Lower bound on what choosing `cand` at `idx` adds to the final
    /// objective. Exact for GPU, split and dw-pair stages; FPGA-whole
    /// nodes get their cheapest possible fused-chain marginal.
    fn candidate_bound(&self, idx: usize, cand: PartitionDecision) -> Result<f64, SimError> {
        let node = &self.graph.nodes()[idx];
        let in_shape = self.graph.node_input_shape(idx).expect("shapes inferred");
        let out_shape = self.graph.output_shape(idx).expect("shapes inferred");
        let fpga = &self.models.fpga;
        Ok(match cand {
            PartitionDecision::GpuOnly => {
                let c = gpu_cost(&node.spec, in_shape, &self.models.gpu)?;
                self.scalarize(c.latency_s, c.energy_j)
            }
            PartitionDecision::FpgaWhole { .. } => {
                let macs = mac_count(&node.spec, in_shape);
                let fill = fpga.pipeline_depth_per_layer as f64 / fpga.clock_hz;
                self.scalarize(
                    fill,
                    fpga.static_power_w * fill + fpga.energy_per_mac_j * macs as f64,
                )
            }
            PartitionDecision::ChannelSplit { g } => {
                let gpu_side = gpu_cost(
                    &node.spec,
                    TensorShape {
                        c: in_shape.c - g,
                        ..in_shape
                    },
                    &self.models.gpu,
                )?;
                let slice = TensorShape { c: g, ..in_shape };
                let fpga_side = fpga_segment_cost(slice, 1, mac_count(&node.spec, slice), fpga);
                let bytes = out_shape.byte_size() * self.options.sim.split_element_bytes();
                let comm = link_cost(bytes, &self.models.link);
                self.scalarize(
                    gpu_side.latency_s.max(fpga_side.latency_s + comm.latency_s),
                    gpu_side.energy_j + fpga_side.energy_j + comm.energy_j,
                )
            }
            PartitionDecision::DwSplit => {
                let pw_idx = self.pair_target[idx].expect("dw_split candidate has a pair");
                let pw = &self.graph.nodes()[pw_idx];
                let pw_out = self.graph.output_shape(pw_idx).expect("shapes inferred");
                let gpu_side = gpu_cost(&node.spec, in_shape, &self.models.gpu)?;
                let comm_in = link_cost(out_shape.byte_size(), &self.models.link);
                let fpga_side =
                    fpga_segment_cost(out_shape, 1, mac_count(&pw.spec, out_shape), fpga);
                let comm_out = link_cost(pw_out.byte_size(), &self.models.link);
                self.scalarize(
                    gpu_side.latency_s + comm_in.latency_s + fpga_side.latency_s + comm_out.latency_s,
                    gpu_side.energy_j + comm_in.energy_j + fpga_side.energy_j + comm_out.energy_j,
                )
            }
        })
    }
}

/// Rewrite placeholder group ids so that maximal contiguous
/// single-consumer chains of FPGA-mapped nodes share a group.
pub fn assign_fused_groups(graph: &ModelGraph, decisions: &mut [PartitionDecision]) {
    let mut grouped = vec![false; decisions.len()];
    let mut next_group = 0usize;
    for i in 0..decisions.len() {
        if grouped[i] || !matches!(decisions[i], PartitionDecision::FpgaWhole { .. }) {
            continue;
        }
        decisions[i] = PartitionDecision::FpgaWhole { group: next_group };
        grouped[i] = true;
        let mut tail = i;
        loop {
            let consumers = graph.consumers(tail);
            if consumers.len() != 1 {
                break;
            }
            let next = consumers[0];
            if grouped[next]
                || !matches!(decisions[next], PartitionDecision::FpgaWhole { .. })
                || graph.nodes()[next].inputs != [PortRef::Node(tail)]
            {
                break;
            }
            decisions[next] = PartitionDecision::FpgaWhole { group: next_group };
            grouped[next] = true;
            tail = next;
        }
        next_group += 1;
    }
}

fn build_plan(
    graph: &ModelGraph,
    objective: Objective,
    mut decisions: Vec<PartitionDecision>,
    usage: FpgaResources,
) -> PartitionPlan {
    assign_fused_groups(graph, &mut decisions);
    PartitionPlan {
        objective,
        decisions: graph
            .nodes()
            .iter()
            .zip(decisions)
            .map(|(n, decision)| LayerDecision {
                layer: n.id.clone(),
                decision,
            })
            .collect(),
        resource_usage: usage,
    }
}

fn plan_key(ctx: &SearchContext, decisions: &[PartitionDecision], report: &CostReport) -> PlanKey {
    PlanKey {
        score: ctx.report_score(report),
        energy: report.total_energy_j,
        latency: report.total_latency_s,
        fpga_nodes: decisions
            .iter()
            .filter(|d| matches!(d, PartitionDecision::FpgaWhole { .. }))
            .count(),
        ranks: decisions.iter().map(|d| d.rank()).collect(),
    }
}

fn evaluate_leaf(
    ctx: &SearchContext,
    decisions: &[PartitionDecision],
    usage: FpgaResources,
    best: &mut Option<(PlanKey, PartitionPlan)>,
) -> Result<(), SimError> {
    let plan = build_plan(ctx.graph, ctx.objective, decisions.to_vec(), usage);
    let report = simulate(ctx.graph, &plan, ctx.models, ctx.options.sim)?;
    let key = plan_key(ctx, decisions, &report);
    let replace = match best {
        Some((best_key, _)) => key.better_than(best_key),
        None => true,
    };
    if replace {
        *best = Some((key, plan));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn dfs(
    ctx: &SearchContext,
    idx: usize,
    decisions: &mut Vec<Option<PartitionDecision>>,
    usage: FpgaResources,
    partial: f64,
    best: &mut Option<(PlanKey, PartitionPlan)>,
) -> Result<(), SimError> {
    if idx == ctx.graph.len() {
        let resolved: Vec<PartitionDecision> =
            decisions.iter().map(|d| d.expect("all nodes decided")).collect();
        return evaluate_leaf(ctx, &resolved, usage, best);
    }
    if decisions[idx].is_some() {
        // forced by a dw_split pair decided earlier
        return dfs(ctx, idx + 1, decisions, usage, partial, best);
    }
    for (ci, &cand) in ctx.candidates[idx].iter().enumerate() {
        let mut new_usage = usage;
        let forced_pw = if cand == PartitionDecision::DwSplit {
            let pw = ctx.pair_target[idx].expect("pair target exists");
            new_usage.accumulate(decision_resources(ctx.graph, pw, cand));
            Some(pw)
        } else {
            new_usage.accumulate(decision_resources(ctx.graph, idx, cand));
            None
        };
        if !new_usage.fits(&ctx.models.fpga) {
            continue;
        }
        let new_partial = partial + ctx.bounds[idx][ci];
        if let Some((best_key, _)) = best {
            // admissible bound: only prune when strictly worse than the
            // incumbent, so ties survive for the tie-break rules
            if new_partial + ctx.suffix_min.get(idx + 1).copied().unwrap_or(0.0) > best_key.score {
                continue;
            }
        }
        decisions[idx] = Some(cand);
        if let Some(pw) = forced_pw {
            decisions[pw] = Some(cand);
        }
        dfs(ctx, idx + 1, decisions, new_usage, new_partial, best)?;
        decisions[idx] = None;
        if let Some(pw) = forced_pw {
            decisions[pw] = None;
        }
    }
    Ok(())
}

#[derive(Clone)]
struct BeamState {
    decisions: Vec<Option<PartitionDecision>>,
    usage: FpgaResources,
    partial: f64,
    ranks: Vec<(u8, u64)>,
}

fn beam_search(ctx: &SearchContext) -> Result<Option<(PlanKey, PartitionPlan)>, SimError> {
    let n = ctx.graph.len();
    let width = ctx.options.beam_width.max(1);
    let mut states = vec![BeamState {
        decisions: vec![None; n],
        usage: FpgaResources::default(),
        partial: 0.0,
        ranks: Vec::new(),
    }];
    for idx in 0..n {
        let mut expanded: Vec<BeamState> = Vec::new();
        for state in &states {
            if let Some(d) = state.decisions[idx] {
                let mut next = state.clone();
                next.ranks.push(d.rank());
                expanded.push(next);
                continue;
            }
            for (ci, &cand) in ctx.candidates[idx].iter().enumerate() {
                let mut next = state.clone();
                if cand == PartitionDecision::DwSplit {
                    let pw = ctx.pair_target[idx].expect("pair target exists");
                    next.usage.accumulate(decision_resources(ctx.graph, pw, cand));
                    next.decisions[pw] = Some(cand);
                } else {
                    next.usage.accumulate(decision_resources(ctx.graph, idx, cand));
                }
                if !next.usage.fits(&ctx.models.fpga) {
                    continue;
                }
                next.decisions[idx] = Some(cand);
                next.partial += ctx.bounds[idx][ci];
                next.ranks.push(cand.rank());
                expanded.push(next);
            }
        }
        expanded.sort_by(|a, b| {
            let fa = a.partial + ctx.suffix_min.get(idx + 1).copied().unwrap_or(0.0);
            let fb = b.partial + ctx.suffix_min.get(idx + 1).copied().unwrap_or(0.0);
            fa.total_cmp(&fb).then(a.ranks.cmp(&b.ranks))
        });
        expanded.truncate(width);
        states = expanded;
    }
    let mut best: Option<(PlanKey, PartitionPlan)> = None;
    for state in states {
        let resolved: Vec<PartitionDecision> =
            state.decisions.iter().map(|d| d.expect("complete")).collect();
        evaluate_leaf(ctx, &resolved, state.usage, &mut best)?;
    }
    Ok(best)
}

/// Find the feasible plan minimizing the objective. The all-GPU plan is
/// always feasible, so a result is guaranteed.
pub fn optimize(
    graph: &ModelGraph,
    models: &DeviceModels,
    objective: Objective,
    options: &PlannerOptions,
) -> Result<PartitionPlan, SimError> {
    if !graph.shapes_inferred() {
        return Err(crate::plan::PlanError::ShapesNotInferred.into());
    }
    let baseline = baseline_gpu_only(graph, models)?;
    let base_latency = if baseline.total_latency_s > 0.0 {
        baseline.total_latency_s
    } else {
        1.0
    };
    let base_energy = if baseline.total_energy_j > 0.0 {
        baseline.total_energy_j
    } else {
        1.0
    };

    let n = graph.len();
    let candidates: Vec<Vec<PartitionDecision>> = (0..n)
        .map(|i| enumerate_candidates(graph, i, &models.fpga, &options.extra_g))
        .collect();
    let pair_target: Vec<Option<usize>> = (0..n)
        .map(|i| {
            candidates[i]
                .contains(&PartitionDecision::DwSplit)
                .then(|| graph.consumers(i)[0])
        })
        .collect();

    let mut ctx = SearchContext {
        graph,
        models,
        objective,
        options,
        candidates,
        bounds: Vec::new(),
        suffix_min: Vec::new(),
        pair_target,
        base_latency,
        base_energy,
    };
    let mut bounds = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(ctx.candidates[i].len());
        for &cand in &ctx.candidates[i] {
            row.push(ctx.candidate_bound(i, cand)?);
        }
        bounds.push(row);
    }
    // a pointwise node that can be absorbed into a dw pair may contribute
    // nothing on its own
    let pairable: Vec<bool> = {
        let mut v = vec![false; n];
        for t in ctx.pair_target.iter().flatten() {
            v[*t] = true;
        }
        v
    };
    let mut suffix_min = vec![0.0; n + 1];
    for i in (0..n).rev() {
        let node_min = if pairable[i] {
            0.0
        } else {
            bounds[i].iter().copied().fold(f64::INFINITY, f64::min)
        };
        suffix_min[i] = node_min + suffix_min[i + 1];
    }
    ctx.bounds = bounds;
    ctx.suffix_min = suffix_min;

    let decision_points = (0..n).filter(|&i| ctx.candidates[i].len() > 1).count();
    let best = if decision_points <= options.exhaustive_limit {
        let mut best = None;
        let mut decisions = vec![None; n];
        dfs(&ctx, 0, &mut decisions, FpgaResources::default(), 0.0, &mut best)?;
        best
    } else {
        beam_search(&ctx)?
    };

    Ok(best
        .map(|(_, plan)| plan)
        .unwrap_or_else(|| PartitionPlan::gpu_only(graph, objective)))
}
