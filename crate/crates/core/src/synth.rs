//! Seeded generators for randomized verification: tensors, weight stores,
//! graphs and plans.
//!
//! Everything here is deterministic in the RNG, so a seed pins an entire
//! verification transcript.

use crate::exec::{LayerWeights, WeightStore};
use crate::fxp::{ConvKernel, DepthwiseKernel, FxpTensor};
use crate::graph::{LayerSpec, ModelGraph, Padding, TensorShape, INPUT_ID};
use crate::plan::{
    enumerate_candidates, LayerDecision, Objective, PartitionDecision, PartitionPlan,
};
use crate::planner::assign_fused_groups;
use crate::cost::FpgaModel;
use rand::Rng;

pub const DEFAULT_FRACTION_BITS: u8 = 6;

pub fn random_tensor<R: Rng>(rng: &mut R, shape: TensorShape, fraction_bits: u8) -> FxpTensor {
    let values = (0..shape.elements()).map(|_| rng.gen::<i8>()).collect();
    FxpTensor::new(shape, fraction_bits, values).expect("generated length matches shape")
}

/// Random weights for every parametric node of a shape-inferred graph.
pub fn random_weights<R: Rng>(rng: &mut R, graph: &ModelGraph, fraction_bits: u8) -> WeightStore {
    let mut store = WeightStore::new();
    for (idx, node) in graph.nodes().iter().enumerate() {
        let in_shape = graph.node_input_shape(idx).expect("shapes inferred");
        match node.spec {
            LayerSpec::Conv {
                k_h, k_w, n, groups, ..
            } => {
                let c = in_shape.c / groups;
                let values = (0..k_h * k_w * c * n).map(|_| rng.gen::<i8>()).collect();
                store.insert(
                    &node.id,
                    LayerWeights::Conv(
                        ConvKernel::new(k_h, k_w, c, n, fraction_bits, values)
                            .expect("generated kernel dims are consistent"),
                    ),
                );
            }
            LayerSpec::Pointwise { n } => {
                let values = (0..in_shape.c * n).map(|_| rng.gen::<i8>()).collect();
                store.insert(
                    &node.id,
                    LayerWeights::Conv(
                        ConvKernel::new(1, 1, in_shape.c, n, fraction_bits, values)
                            .expect("generated kernel dims are consistent"),
                    ),
                );
            }
            LayerSpec::DepthwiseConv { k, .. } => {
                let values = (0..k * k * in_shape.c).map(|_| rng.gen::<i8>()).collect();
                store.insert(
                    &node.id,
                    LayerWeights::Depthwise(
                        DepthwiseKernel::new(k, in_shape.c, fraction_bits, values)
                            .expect("generated kernel dims are consistent"),
                    ),
                );
            }
            _ => {}
        }
    }
    store
}

/// Bounds for [`random_graph`]. Defaults keep tensors within 8x8x8.
#[derive(Debug, Clone)]
pub struct GraphGen {
    pub max_motifs: usize,
    pub max_spatial: usize,
    pub max_channels: usize,
}

impl Default for GraphGen {
    fn default() -> Self {
        Self {
            max_motifs: 4,
            max_spatial: 8,
            max_channels: 8,
        }
    }
}

/// Random valid graph built from motifs that together exercise every layer
/// kind: plain convolutions, depthwise->pointwise pairs, pooled chains,
/// split/concat/shuffle blocks and residual adds.
pub fn random_graph<R: Rng>(rng: &mut R, cfg: &GraphGen) -> ModelGraph {
    let h = rng.gen_range(3..=cfg.max_spatial);
    let w = rng.gen_range(3..=cfg.max_spatial);
    let c = rng.gen_range(1..=cfg.max_channels);
    let mut graph = ModelGraph::new("synth", TensorShape::new(h, w, c));

    let mut tip = INPUT_ID.to_string();
    let mut shape = graph.input_shape;
    let mut serial = 0usize;
    let mut next_id = |prefix: &str| {
        serial += 1;
        format!("{prefix}{serial}")
    };

    let motifs = rng.gen_range(1..=cfg.max_motifs);
    for _ in 0..motifs {
        match rng.gen_range(0..6) {
            // plain convolution
            0 => {
                let k = *[1usize, 3, 5].get(rng.gen_range(0..3)).unwrap();
                let stride = rng.gen_range(1..=2);
                let padding = if k <= shape.h && k <= shape.w && rng.gen_bool(0.3) {
                    Padding::Valid
                } else {
                    Padding::Same
                };
                let n = rng.gen_range(1..=cfg.max_channels);
                let id = next_id("conv");
                graph
                    .add_node(
                        &id,
                        LayerSpec::Conv {
                            k_h: k,
                            k_w: k,
                            n,
                            stride,
                            padding,
                            groups: 1,
                        },
                        &[&tip],
                    )
                    .expect("valid conv motif");
                tip = id;
            }
            // depthwise -> pointwise pair (dw_split candidate)
            1 => {
                let stride = rng.gen_range(1..=2);
                let dw = next_id("dw");
                graph
                    .add_node(
                        &dw,
                        LayerSpec::DepthwiseConv {
                            k: 3,
                            stride,
                            padding: Padding::Same,
                        },
                        &[&tip],
                    )
                    .expect("valid dw motif");
                let n = rng.gen_range(1..=cfg.max_channels);
                let pw = next_id("pw");
                graph
                    .add_node(&pw, LayerSpec::Pointwise { n }, &[&dw])
                    .expect("valid pw motif");
                tip = pw;
            }
            // pooling
            2 => {
                let id = next_id("pool");
                let spec = if rng.gen_bool(0.5) {
                    LayerSpec::MaxPool {
                        k: 2,
                        stride: 2,
                        padding: Padding::Same,
                    }
                } else {
                    LayerSpec::AvgPool {
                        k: 2,
                        stride: 2,
                        padding: Padding::Same,
                    }
                };
                graph.add_node(&id, spec, &[&tip]).expect("valid pool motif");
                tip = id;
            }
            // two pointwise branches concatenated
            3 => {
                let n1 = rng.gen_range(1..=cfg.max_channels / 2);
                let n2 = rng.gen_range(1..=cfg.max_channels / 2);
                let a = next_id("bra");
                let b = next_id("brb");
                let cat = next_id("cat");
                graph
                    .add_node(&a, LayerSpec::Pointwise { n: n1 }, &[&tip])
                    .expect("valid branch");
                graph
                    .add_node(&b, LayerSpec::Pointwise { n: n2 }, &[&tip])
                    .expect("valid branch");
                graph
                    .add_node(&cat, LayerSpec::Concat, &[&a, &b])
                    .expect("valid concat");
                tip = cat;
            }
            // residual add over two same-shape convs
            4 => {
                let n = rng.gen_range(1..=cfg.max_channels);
                let a = next_id("resa");
                let b = next_id("resb");
                let add = next_id("add");
                let conv3 = LayerSpec::Conv {
                    k_h: 3,
                    k_w: 3,
                    n,
                    stride: 1,
                    padding: Padding::Same,
                    groups: 1,
                };
                graph.add_node(&a, conv3.clone(), &[&tip]).expect("valid res branch");
                graph.add_node(&b, conv3, &[&tip]).expect("valid res branch");
                graph.add_node(&add, LayerSpec::Add, &[&a, &b]).expect("valid add");
                tip = add;
            }
            // split / branch / concat / shuffle block
            _ => {
                if !shape.c.is_multiple_of(2) {
                    // make the channel count even first
                    let n = 2 * rng.gen_range(1..=cfg.max_channels / 2);
                    let fix = next_id("even");
                    graph
                        .add_node(&fix, LayerSpec::Pointwise { n }, &[&tip])
                        .expect("valid pad-to-even");
                    tip = fix;
                    shape = TensorShape {
                        c: n,
                        ..shape
                    };
                }
                let half = shape.c / 2;
                let s0 = next_id("sp");
                let s1 = next_id("sp");
                let pw = next_id("pw");
                let cat = next_id("cat");
                let sh = next_id("sh");
                graph
                    .add_node(&s0, LayerSpec::ChannelSplit { part: 0, parts: 2 }, &[&tip])
                    .expect("valid split");
                graph
                    .add_node(&s1, LayerSpec::ChannelSplit { part: 1, parts: 2 }, &[&tip])
                    .expect("valid split");
                graph
                    .add_node(&pw, LayerSpec::Pointwise { n: half }, &[&s1])
                    .expect("valid branch pw");
                graph
                    .add_node(&cat, LayerSpec::Concat, &[&s0, &pw])
                    .expect("valid concat");
                graph
                    .add_node(&sh, LayerSpec::ChannelShuffle { groups: 2 }, &[&cat])
                    .expect("valid shuffle");
                tip = sh;
            }
        }
        let inferred = graph.infer_shapes().expect("motifs keep the graph valid");
        shape = inferred.output_shape(inferred.len() - 1).expect("nonempty");
    }
    graph.infer_shapes().expect("final graph is valid")
}

/// Random structurally valid plan: a uniform pick from each node's
/// candidates, with dw pairs forced consistently and maximal fusion
/// applied. Resource feasibility is not enforced; execution semantics do
/// not depend on budgets.
pub fn random_plan<R: Rng>(
    rng: &mut R,
    graph: &ModelGraph,
    fpga: &FpgaModel,
    objective: Objective,
) -> PartitionPlan {
    let n = graph.len();
    let mut decisions: Vec<Option<PartitionDecision>> = vec![None; n];
    for idx in 0..n {
        if decisions[idx].is_some() {
            continue;
        }
        let cands = enumerate_candidates(graph, idx, fpga, &[]);
        let pick = cands[rng.gen_range(0..cands.len())];
        decisions[idx] = Some(pick);
        if pick == PartitionDecision::DwSplit {
            let pw = graph.consumers(idx)[0];
            decisions[pw] = Some(PartitionDecision::DwSplit);
        }
    }
    let mut resolved: Vec<PartitionDecision> = decisions.into_iter().map(|d| d.unwrap()).collect();
    assign_fused_groups(graph, &mut resolved);
    PartitionPlan {
        objective,
        decisions: graph
            .nodes()
            .iter()
            .zip(resolved)
            .map(|(node, decision)| LayerDecision {
                layer: node.id.clone(),
                decision,
            })
            .collect(),
        resource_usage: Default::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::{execute_graph, execute_plan};
    use crate::plan::validate_structure;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_graphs_are_valid_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let g = random_graph(&mut rng, &GraphGen::default());
            assert!(g.shapes_inferred());
            assert!(!g.is_empty());
            for i in 0..g.len() {
                let s = g.output_shape(i).unwrap();
                assert!(s.h <= 8 && s.w <= 8, "spatial bound exceeded: {s}");
            }
        }
    }

    #[test]
    fn generated_plans_validate_structurally() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let fpga = FpgaModel::default();
        for _ in 0..50 {
            let g = random_graph(&mut rng, &GraphGen::default());
            let plan = random_plan(&mut rng, &g, &fpga, Objective::Energy);
            validate_structure(&g, &plan).expect("generated plan is structurally valid");
        }
    }

    #[test]
    fn quick_equivalence_smoke() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let fpga = FpgaModel::default();
        for _ in 0..20 {
            let g = random_graph(&mut rng, &GraphGen::default());
            let input = random_tensor(&mut rng, g.input_shape, DEFAULT_FRACTION_BITS);
            let weights = random_weights(&mut rng, &g, DEFAULT_FRACTION_BITS);
            let plan = random_plan(&mut rng, &g, &fpga, Objective::Energy);
            let a = execute_graph(&g, &input, &weights).unwrap();
            let b = execute_plan(&g, &plan, &input, &weights).unwrap();
            assert_eq!(a, b);
        }
    }
}
