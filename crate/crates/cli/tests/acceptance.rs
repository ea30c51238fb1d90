//! Acceptance suite: one test per acceptance criterion. Each prints a
//! `[PASS]`/`[FAIL]` line (visible with `cargo test -- --nocapture`) and
//! enforces its runtime budget.

use hetplan_cli::{cmd_plan, PlanRequest};
use hetplan_core::cost::{fpga_cost, fpga_resources, link_cost, CostError, FpgaModel, LinkModel};
use hetplan_core::exec::{execute_graph, execute_plan};
use hetplan_core::fxp::{channel_split_conv, combine_partials, conv2d, ConvKernel};
use hetplan_core::graph::{
    mac_count, output_shape, LayerSpec, ModelGraph, Padding, TensorShape, INPUT_ID,
};
use hetplan_core::plan::{
    enumerate_candidates, validate_plan, LayerDecision, Objective, PartitionDecision, PartitionPlan,
};
use hetplan_core::planner::{assign_fused_groups, optimize, PlannerOptions};
use hetplan_core::sim::{simulate, stage_latency, SimOptions, StageMode};
use hetplan_core::synth::{random_graph, random_plan, random_tensor, random_weights, GraphGen};
use hetplan_core::DeviceModels;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(rel)
}

/// Run one criterion, print its verdict line, enforce the runtime budget.
fn criterion(name: &str, limit: Option<Duration>, body: impl FnOnce()) {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(body));
    let elapsed = start.elapsed();
    match result {
        Ok(()) => {
            println!("[PASS] {name} ({elapsed:.2?})");
            if let Some(limit) = limit {
                assert!(
                    elapsed < limit,
                    "{name} exceeded its runtime budget: {elapsed:.2?} >= {limit:?}"
                );
            }
        }
        Err(cause) => {
            println!("[FAIL] {name} ({elapsed:.2?})");
            resume_unwind(cause);
        }
    }
}

fn default_models() -> DeviceModels {
    hetplan_cli::load_device_models(None, None).unwrap()
}

#[test]
fn criterion_01_partition_equivalence() {
    criterion(
        "criterion 1: partition equivalence over 200+ random graphs",
        Some(Duration::from_secs(60)),
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
            let fpga = FpgaModel::default();
            let mut layer_kinds = BTreeSet::new();
            let mut decision_kinds = BTreeSet::new();
            for case in 0..220 {
                let graph = random_graph(&mut rng, &GraphGen::default());
                let input = random_tensor(&mut rng, graph.input_shape, 6);
                let weights = random_weights(&mut rng, &graph, 6);
                let plan = random_plan(&mut rng, &graph, &fpga, Objective::Energy);
                for node in graph.nodes() {
                    layer_kinds.insert(node.spec.kind_name());
                }
                for d in &plan.decisions {
                    decision_kinds.insert(match d.decision {
                        PartitionDecision::GpuOnly => "gpu_only",
                        PartitionDecision::FpgaWhole { .. } => "fpga_whole",
                        PartitionDecision::ChannelSplit { .. } => "channel_split",
                        PartitionDecision::DwSplit => "dw_split",
                    });
                }
                let reference = execute_graph(&graph, &input, &weights).unwrap();
                let partitioned = execute_plan(&graph, &plan, &input, &weights).unwrap();
                assert_eq!(reference, partitioned, "case {case} diverged");
            }
            assert_eq!(layer_kinds.len(), 9, "suite must cover all layer kinds: {layer_kinds:?}");
            assert_eq!(
                decision_kinds.len(),
                4,
                "suite must cover all decision kinds: {decision_kinds:?}"
            );
        },
    );
}

#[test]
fn criterion_02_split_sum_exactness() {
    criterion(
        "criterion 2: split-sum exactness, exhaustive C_I <= 6, k in {1,3,5}",
        Some(Duration::from_secs(30)),
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let h = 6usize;
            let n = 3usize;
            for c in 2..=6usize {
                for k in [1usize, 3, 5] {
                    for stride in [1usize, 2] {
                        for padding in [Padding::Same, Padding::Valid] {
                            if padding == Padding::Valid && k > h {
                                continue;
                            }
                            let shape = TensorShape::new(h, h - 1, c);
                            let ifm = random_tensor(&mut rng, shape, 6);
                            let values: Vec<i8> =
                                (0..k * k * c * n).map(|_| rng.gen::<i8>()).collect();
                            let kernel = ConvKernel::new(k, k, c, n, 6, values).unwrap();
                            let spec = LayerSpec::Conv {
                                k_h: k,
                                k_w: k,
                                n,
                                stride,
                                padding,
                                groups: 1,
                            };
                            let whole = conv2d(&ifm, &kernel, &spec).unwrap();
                            for g in 1..c {
                                let (a, b) = channel_split_conv(&ifm, &kernel, &spec, g).unwrap();
                                let combined = combine_partials(&a, &b).unwrap();
                                assert_eq!(
                                    combined, whole,
                                    "c={c} g={g} k={k} stride={stride} {padding}"
                                );
                            }
                        }
                    }
                }
            }
        },
    );
}

/// Independent oracle: count multiplies by walking every output position
/// and kernel tap in nested loops.
fn loop_mac_counter(spec: &LayerSpec, in_shape: TensorShape) -> u64 {
    let out = match output_shape(spec, &[in_shape]) {
        Ok(s) => s,
        Err(_) => return 0,
    };
    let (k_h, k_w, c_per_group, n) = match *spec {
        LayerSpec::Conv { k_h, k_w, n, groups, .. } => (k_h, k_w, in_shape.c / groups, n),
        LayerSpec::DepthwiseConv { k, .. } => (k, k, 1, in_shape.c),
        LayerSpec::Pointwise { n } => (1, 1, in_shape.c, n),
        _ => return 0,
    };
    let mut count = 0u64;
    for _oy in 0..out.h {
        for _ox in 0..out.w {
            for _no in 0..n {
                for _ky in 0..k_h {
                    for _kx in 0..k_w {
                        for _c in 0..c_per_group {
                            count += 1;
                        }
                    }
                }
            }
        }
    }
    count
}

#[test]
fn criterion_03_mac_oracle() {
    criterion(
        "criterion 3: MAC counts match the loop-counter oracle (exhaustive sweep)",
        Some(Duration::from_secs(10)),
        || {
            let mut checked = 0u64;
            for h in 1..=8usize {
                for w in 1..=8usize {
                    for c in 1..=4usize {
                        for n in 1..=4usize {
                            for k in [1usize, 3, 5] {
                                for stride in [1usize, 2] {
                                    for padding in [Padding::Same, Padding::Valid] {
                                        let shape = TensorShape::new(h, w, c);
                                        let mut specs = vec![LayerSpec::Conv {
                                            k_h: k,
                                            k_w: k,
                                            n,
                                            stride,
                                            padding,
                                            groups: 1,
                                        }];
                                        for groups in [2usize, 4] {
                                            if c % groups == 0 && n % groups == 0 {
                                                specs.push(LayerSpec::Conv {
                                                    k_h: k,
                                                    k_w: k,
                                                    n,
                                                    stride,
                                                    padding,
                                                    groups,
                                                });
                                            }
                                        }
                                        specs.push(LayerSpec::DepthwiseConv { k, stride, padding });
                                        specs.push(LayerSpec::Pointwise { n });
                                        for spec in specs {
                                            if output_shape(&spec, &[shape]).is_err() {
                                                continue;
                                            }
                                            assert_eq!(
                                                mac_count(&spec, shape),
                                                loop_mac_counter(&spec, shape),
                                                "{spec:?} on {shape}"
                                            );
                                            checked += 1;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            assert!(checked > 30_000, "sweep too small: {checked}");
        },
    );
}

#[test]
fn criterion_04_feasibility_cliff() {
    criterion(
        "criterion 4: feasibility cliff at 64 filters of 5x5 (4800 multipliers)",
        None,
        || {
            let model = FpgaModel::default();
            let shape = TensorShape::new(224, 224, 3);
            let conv = |k: usize| LayerSpec::Conv {
                k_h: k,
                k_w: k,
                n: 64,
                stride: 1,
                padding: Padding::Same,
                groups: 1,
            };
            assert_eq!(fpga_resources(&conv(5), shape).macs, 4800);
            assert_eq!(fpga_resources(&conv(7), shape).macs, 9408);

            let make_plan = |k: usize| {
                let mut g = ModelGraph::new("t", shape);
                g.add_node("c", conv(k), &[INPUT_ID]).unwrap();
                let g = g.infer_shapes().unwrap();
                let plan = PartitionPlan {
                    objective: Objective::Energy,
                    decisions: vec![LayerDecision {
                        layer: "c".into(),
                        decision: PartitionDecision::FpgaWhole { group: 0 },
                    }],
                    resource_usage: Default::default(),
                };
                validate_plan(&g, &plan, &model).unwrap()
            };
            let v5 = make_plan(5);
            assert!(v5.feasible);
            assert_eq!(v5.usage.macs, 4800);
            let v7 = make_plan(7);
            assert!(!v7.feasible);
            assert_eq!(v7.usage.macs, 9408);
            assert!(matches!(
                fpga_cost(&conv(7), shape, &model),
                Err(CostError::Infeasible { needed: 9408, budget: 4800 })
            ));
        },
    );
}

#[test]
fn criterion_05_latency_hiding() {
    criterion(
        "criterion 5: parallel-split latency hiding is exact",
        None,
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..10_000 {
                let gpu: f64 = rng.gen_range(0.0..1.0e-2);
                let fpga: f64 = rng.gen_range(0.0..1.0e-2);
                let comm: f64 = rng.gen_range(0.0..1.0e-2);
                let lat = stage_latency(StageMode::ParallelSplit, gpu, fpga, comm);
                if fpga + comm <= gpu {
                    assert_eq!(lat, gpu);
                } else {
                    assert_eq!(lat, fpga + comm);
                }
            }
            // exact boundary: fpga + comm == gpu
            assert_eq!(stage_latency(StageMode::ParallelSplit, 7e-3, 4e-3, 3e-3), 7e-3);
        },
    );
}

#[test]
fn criterion_06_link_model_anchor() {
    criterion(
        "criterion 6: 301056 bytes at 2.5 GB/s -> 120.42 us (rel. 1e-9)",
        None,
        || {
            let model = LinkModel {
                bandwidth_bytes_per_s: 2.5e9,
                fixed_latency_s: 0.0,
                energy_per_byte_j: 1e-9,
            };
            let cost = link_cost(301_056, &model);
            let expected = 1.204224e-4;
            assert!(
                (cost.latency_s - expected).abs() / expected <= 1e-9,
                "got {}",
                cost.latency_s
            );
        },
    );
}

/// Plain product enumeration over the candidate space, no pruning, scored
/// by full simulation: the independent optimality oracle.
fn brute_force_minimum(
    graph: &ModelGraph,
    models: &DeviceModels,
    objective: Objective,
    options: &PlannerOptions,
) -> Option<f64> {
    let n = graph.len();
    let candidates: Vec<Vec<PartitionDecision>> = (0..n)
        .map(|i| enumerate_candidates(graph, i, &models.fpga, &options.extra_g))
        .collect();
    let mut best: Option<f64> = None;
    let mut decisions: Vec<Option<PartitionDecision>> = vec![None; n];

    #[allow(clippy::too_many_arguments)]
    fn walk(
        graph: &ModelGraph,
        models: &DeviceModels,
        objective: Objective,
        options: &PlannerOptions,
        candidates: &[Vec<PartitionDecision>],
        idx: usize,
        decisions: &mut Vec<Option<PartitionDecision>>,
        best: &mut Option<f64>,
    ) {
        if idx == graph.len() {
            let mut resolved: Vec<PartitionDecision> =
                decisions.iter().map(|d| d.unwrap()).collect();
            assign_fused_groups(graph, &mut resolved);
            let plan = PartitionPlan {
                objective,
                decisions: graph
                    .nodes()
                    .iter()
                    .zip(&resolved)
                    .map(|(node, d)| LayerDecision {
                        layer: node.id.clone(),
                        decision: *d,
                    })
                    .collect(),
                resource_usage: Default::default(),
            };
            // infeasible plans fail simulation and drop out here
            if let Ok(report) = simulate(graph, &plan, models, options.sim) {
                let score = match objective {
                    Objective::Latency => report.total_latency_s,
                    Objective::Energy => report.total_energy_j,
                    Objective::Weighted { .. } => unreachable!("oracle runs pure objectives"),
                };
                if best.is_none_or(|b| score < b) {
                    *best = Some(score);
                }
            }
            return;
        }
        if decisions[idx].is_some() {
            walk(graph, models, objective, options, candidates, idx + 1, decisions, best);
            return;
        }
        for &cand in &candidates[idx] {
            decisions[idx] = Some(cand);
            let forced = if cand == PartitionDecision::DwSplit {
                let pw = graph.consumers(idx)[0];
                decisions[pw] = Some(cand);
                Some(pw)
            } else {
                None
            };
            walk(graph, models, objective, options, candidates, idx + 1, decisions, best);
            decisions[idx] = None;
            if let Some(pw) = forced {
                decisions[pw] = None;
            }
        }
    }

    walk(
        graph,
        models,
        objective,
        options,
        &candidates,
        0,
        &mut decisions,
        &mut best,
    );
    best
}

#[test]
fn criterion_07_planner_optimality() {
    criterion(
        "criterion 7: exhaustive-search optimality on small instances",
        Some(Duration::from_secs(120)),
        || {
            let models = default_models();
            let options = PlannerOptions::default();

            let mut instances: Vec<ModelGraph> = vec![
                hetplan_core::templates::fire(&Default::default()).unwrap(),
                hetplan_core::templates::bottleneck(&Default::default()).unwrap(),
                hetplan_core::templates::shufflenet_unit(&Default::default()).unwrap(),
                hetplan_core::templates::shufflenet_unit_down(&Default::default()).unwrap(),
            ];
            // random small graphs with at most 8 decision points and a
            // bounded enumeration product so the oracle stays fast
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            while instances.len() < 14 {
                let g = random_graph(&mut rng, &GraphGen::default());
                let candidate_counts: Vec<usize> = (0..g.len())
                    .map(|i| enumerate_candidates(&g, i, &models.fpga, &[]).len())
                    .collect();
                let points = candidate_counts.iter().filter(|&&c| c > 1).count();
                let product: usize = candidate_counts.iter().product();
                if points == 0 || points > 8 || product > 30_000 {
                    continue;
                }
                instances.push(g);
            }

            for graph in &instances {
                let points = (0..graph.len())
                    .filter(|&i| enumerate_candidates(graph, i, &models.fpga, &[]).len() > 1)
                    .count();
                assert!(points <= 8, "instance '{}' has {points} decision points", graph.name);
                for objective in [Objective::Energy, Objective::Latency] {
                    let plan = optimize(graph, &models, objective, &options).unwrap();
                    let verdict = validate_plan(graph, &plan, &models.fpga).unwrap();
                    assert!(verdict.feasible, "optimize returned an infeasible plan");
                    let report = simulate(graph, &plan, &models, options.sim).unwrap();
                    let got = match objective {
                        Objective::Latency => report.total_latency_s,
                        Objective::Energy => report.total_energy_j,
                        _ => unreachable!(),
                    };
                    let want = brute_force_minimum(graph, &models, objective, &options)
                        .expect("all-GPU plan is always feasible");
                    assert_eq!(
                        got, want,
                        "planner missed the optimum on '{}' ({objective:?})",
                        graph.name
                    );
                }
            }
        },
    );
}

#[test]
fn criterion_08_qualitative_gain_reproduction() {
    criterion(
        "criterion 8: gain direction matches the comparison-table rows",
        None,
        || {
            for model in ["fire", "bottleneck", "shufflenet_unit"] {
                // shipped fpga-favorable fixture is the default calibration
                let outcome = cmd_plan(&PlanRequest {
                    model: format!("builtin:{model}"),
                    device_config: None,
                    calibration: None,
                    objective: Objective::Energy,
                    beam_width: 32,
                    g_grid: vec![],
                    exact_transfers: false,
                    out: None,
                })
                .unwrap();
                assert!(
                    outcome.gains.energy_gain >= 1.2,
                    "{model}: energy gain {} < 1.2",
                    outcome.gains.energy_gain
                );
                assert!(
                    outcome.gains.speedup >= 1.0,
                    "{model}: speedup {} < 1.0",
                    outcome.gains.speedup
                );

                let dominated = cmd_plan(&PlanRequest {
                    model: format!("builtin:{model}"),
                    device_config: None,
                    calibration: Some(fixture("calibration/gpu_dominant.csv")),
                    objective: Objective::Energy,
                    beam_width: 32,
                    g_grid: vec![],
                    exact_transfers: false,
                    out: None,
                })
                .unwrap();
                assert!(dominated
                    .plan
                    .decisions
                    .iter()
                    .all(|d| d.decision == PartitionDecision::GpuOnly));
                assert_eq!(dominated.gains.energy_gain, 1.0, "{model}");
                assert_eq!(dominated.gains.speedup, 1.0, "{model}");
            }
        },
    );
}

#[test]
fn criterion_09_fusion_dominance() {
    criterion(
        "criterion 9: fusing an FPGA chain never increases bytes or latency",
        Some(Duration::from_secs(30)),
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut models = default_models();
            // fixed assignments, not planned: lift the budgets out of the way
            models.fpga.mac_budget = u64::MAX;
            models.fpga.memory_budget_bytes = u64::MAX;

            for case in 0..100 {
                // random chain of 2..=5 parametric layers
                let len = rng.gen_range(2..=5usize);
                let h = rng.gen_range(4..=8usize);
                let c0 = rng.gen_range(1..=6usize);
                let mut graph = ModelGraph::new("chain", TensorShape::new(h, h, c0));
                let mut prev = INPUT_ID.to_string();
                for i in 0..len {
                    let id = format!("l{i}");
                    let spec = match rng.gen_range(0..3) {
                        0 => LayerSpec::Pointwise {
                            n: rng.gen_range(1..=6),
                        },
                        1 => LayerSpec::DepthwiseConv {
                            k: 3,
                            stride: 1,
                            padding: Padding::Same,
                        },
                        _ => LayerSpec::Conv {
                            k_h: 3,
                            k_w: 3,
                            n: rng.gen_range(1..=6),
                            stride: 1,
                            padding: Padding::Same,
                            groups: 1,
                        },
                    };
                    graph.add_node(&id, spec, &[&prev]).unwrap();
                    prev = id;
                }
                let graph = graph.infer_shapes().unwrap();

                let fused = PartitionPlan {
                    objective: Objective::Energy,
                    decisions: graph
                        .nodes()
                        .iter()
                        .map(|n| LayerDecision {
                            layer: n.id.clone(),
                            decision: PartitionDecision::FpgaWhole { group: 0 },
                        })
                        .collect(),
                    resource_usage: Default::default(),
                };
                let unfused = PartitionPlan {
                    objective: Objective::Energy,
                    decisions: graph
                        .nodes()
                        .iter()
                        .enumerate()
                        .map(|(i, n)| LayerDecision {
                            layer: n.id.clone(),
                            decision: PartitionDecision::FpgaWhole { group: i },
                        })
                        .collect(),
                    resource_usage: Default::default(),
                };
                let fused_report = simulate(&graph, &fused, &models, SimOptions::default()).unwrap();
                let unfused_report =
                    simulate(&graph, &unfused, &models, SimOptions::default()).unwrap();
                assert!(
                    fused_report.total_bytes_transferred <= unfused_report.total_bytes_transferred,
                    "case {case}: fused bytes grew"
                );
                assert!(
                    fused_report.total_latency_s <= unfused_report.total_latency_s,
                    "case {case}: fused latency grew"
                );
            }
        },
    );
}

#[test]
fn criterion_10_determinism() {
    criterion(
        "criterion 10: plan artifacts are byte-identical across runs",
        None,
        || {
            let run = |dir: &std::path::Path| {
                cmd_plan(&PlanRequest {
                    model: "builtin:fire".to_string(),
                    device_config: None,
                    calibration: None,
                    objective: Objective::Energy,
                    beam_width: 32,
                    g_grid: vec![2, 6],
                    exact_transfers: false,
                    out: Some(dir.to_path_buf()),
                })
                .unwrap();
            };
            let a = tempfile::tempdir().unwrap();
            let b = tempfile::tempdir().unwrap();
            run(a.path());
            run(b.path());
            for name in ["plan.json", "report.json", "baseline.json", "stages.csv", "gains.csv"] {
                let left = std::fs::read(a.path().join(name)).unwrap();
                let right = std::fs::read(b.path().join(name)).unwrap();
                assert_eq!(left, right, "{name} differs between runs");
                assert!(!left.is_empty());
            }
        },
    );
}
