//! Fixed-point execution of graphs and of partitioned plans, plus the flat
//! binary formats for tensors and weight stores.
//!
//! `execute_plan` rewrites the evaluation per the plan's decisions —
//! channel splits run through the partial-accumulator path, dw pairs run
//! as two separate stages — but must produce output bit-identical to
//! `execute_graph`: partitioning changes cost, never arithmetic.

use crate::fxp::{
    add_tensors, avgpool, channel_shuffle, channel_split, channel_split_conv, combine_partials,
    concat, conv2d, depthwise_conv2d, maxpool, ConvKernel, DepthwiseKernel, FxpError, FxpTensor,
};
use crate::graph::{LayerSpec, ModelGraph, PortRef, TensorShape};
use crate::plan::{validate_structure, PartitionDecision, PartitionPlan, PlanError};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("no weights stored for layer '{0}'")]
    MissingWeights(String),
    #[error("layer '{layer}' expects {expected} weights")]
    WrongWeightKind { layer: String, expected: &'static str },
    #[error("graph shapes must be inferred before execution")]
    ShapesNotInferred,
    #[error("input tensor is {got}, graph expects {expected}")]
    InputShape { got: TensorShape, expected: TensorShape },
    #[error("layer '{layer}': {source}")]
    Kernel {
        layer: String,
        #[source]
        source: FxpError,
    },
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("binary format: {0}")]
    Format(String),
}

/// Weights for one parametric layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerWeights {
    Conv(ConvKernel),
    Depthwise(DepthwiseKernel),
}

/// Per-layer weight map, ordered by layer id for deterministic
/// serialization.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WeightStore {
    entries: BTreeMap<String, LayerWeights>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: impl Into<String>, weights: LayerWeights) {
        self.entries.insert(layer.into(), weights);
    }

    pub fn get(&self, layer: &str) -> Option<&LayerWeights> {
        self.entries.get(layer)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn conv(&self, layer: &str) -> Result<&ConvKernel, ExecError> {
        match self.get(layer) {
            Some(LayerWeights::Conv(k)) => Ok(k),
            Some(LayerWeights::Depthwise(_)) => Err(ExecError::WrongWeightKind {
                layer: layer.to_string(),
                expected: "convolution",
            }),
            None => Err(ExecError::MissingWeights(layer.to_string())),
        }
    }

    fn depthwise(&self, layer: &str) -> Result<&DepthwiseKernel, ExecError> {
        match self.get(layer) {
            Some(LayerWeights::Depthwise(k)) => Ok(k),
            Some(LayerWeights::Conv(_)) => Err(ExecError::WrongWeightKind {
                layer: layer.to_string(),
                expected: "depthwise",
            }),
            None => Err(ExecError::MissingWeights(layer.to_string())),
        }
    }
}

fn eval_node(
    graph: &ModelGraph,
    idx: usize,
    inputs: &[&FxpTensor],
    weights: &WeightStore,
    decision: PartitionDecision,
) -> Result<FxpTensor, ExecError> {
    let node = &graph.nodes()[idx];
    let wrap = |e: FxpError| ExecError::Kernel {
        layer: node.id.clone(),
        source: e,
    };
    match &node.spec {
        LayerSpec::Conv { .. } | LayerSpec::Pointwise { .. } => {
            let kernel = weights.conv(&node.id)?;
            if let PartitionDecision::ChannelSplit { g } = decision {
                // split route: two partial accumulations recombined once
                let (a, b) = channel_split_conv(inputs[0], kernel, &node.spec, g).map_err(wrap)?;
                combine_partials(&a, &b).map_err(wrap)
            } else {
                conv2d(inputs[0], kernel, &node.spec).map_err(wrap)
            }
        }
        LayerSpec::DepthwiseConv { .. } => {
            let kernel = weights.depthwise(&node.id)?;
            depthwise_conv2d(inputs[0], kernel, &node.spec).map_err(wrap)
        }
        LayerSpec::MaxPool { k, stride, padding } => {
            maxpool(inputs[0], *k, *stride, *padding).map_err(wrap)
        }
        LayerSpec::AvgPool { k, stride, padding } => {
            avgpool(inputs[0], *k, *stride, *padding).map_err(wrap)
        }
        LayerSpec::Concat => concat(inputs).map_err(wrap),
        LayerSpec::Add => add_tensors(inputs).map_err(wrap),
        LayerSpec::ChannelSplit { part, parts } => {
            channel_split(inputs[0], *part, *parts).map_err(wrap)
        }
        LayerSpec::ChannelShuffle { groups } => channel_shuffle(inputs[0], *groups).map_err(wrap),
    }
}

fn run(
    graph: &ModelGraph,
    input: &FxpTensor,
    weights: &WeightStore,
    decisions: Option<&[PartitionDecision]>,
) -> Result<Vec<FxpTensor>, ExecError> {
    if !graph.shapes_inferred() {
        return Err(ExecError::ShapesNotInferred);
    }
    if input.shape != graph.input_shape {
        return Err(ExecError::InputShape {
            got: input.shape,
            expected: graph.input_shape,
        });
    }
    let mut outputs: Vec<FxpTensor> = Vec::with_capacity(graph.len());
    for idx in 0..graph.len() {
        let node = &graph.nodes()[idx];
        let ins: Vec<&FxpTensor> = node
            .inputs
            .iter()
            .map(|p| match p {
                PortRef::GraphInput => input,
                PortRef::Node(i) => &outputs[*i],
            })
            .collect();
        let decision = decisions
            .map(|d| d[idx])
            .unwrap_or(PartitionDecision::GpuOnly);
        outputs.push(eval_node(graph, idx, &ins, weights, decision)?);
    }
    Ok(outputs)
}

/// Evaluate the graph unpartitioned, in topological order. The output of
/// the last node is the graph output.
pub fn execute_graph(
    graph: &ModelGraph,
    input: &FxpTensor,
    weights: &WeightStore,
) -> Result<FxpTensor, ExecError> {
    Ok(run(graph, input, weights, None)?
        .pop()
        .unwrap_or_else(|| input.clone()))
}

/// Evaluate the graph as rewritten by a plan. Fused groups and dw pairs
/// evaluate exactly like the plain graph (fusion changes cost only);
/// channel-split decisions run through the partial-accumulator route.
pub fn execute_plan(
    graph: &ModelGraph,
    plan: &PartitionPlan,
    input: &FxpTensor,
    weights: &WeightStore,
) -> Result<FxpTensor, ExecError> {
    let decisions = validate_structure(graph, plan)?;
    Ok(run(graph, input, weights, Some(&decisions))?
        .pop()
        .unwrap_or_else(|| input.clone()))
}

/// Like [`execute_graph`] but returns every node's output, for per-layer
/// equivalence checking.
pub fn execute_graph_trace(
    graph: &ModelGraph,
    input: &FxpTensor,
    weights: &WeightStore,
) -> Result<Vec<FxpTensor>, ExecError> {
    run(graph, input, weights, None)
}

/// Like [`execute_plan`] but returns every node's output.
pub fn execute_plan_trace(
    graph: &ModelGraph,
    plan: &PartitionPlan,
    input: &FxpTensor,
    weights: &WeightStore,
) -> Result<Vec<FxpTensor>, ExecError> {
    let decisions = validate_structure(graph, plan)?;
    run(graph, input, weights, Some(&decisions))
}

// ── flat binary formats ─────────────────────────────────────────────────
//
// Tensor file: four little-endian u32 header fields (h, w, c,
// fraction_bits) followed by exactly h*w*c raw signed bytes in row-major
// (h, w, c) order.
//
// Weight store file: little-endian u32 record count, then per record
// (sorted by layer id): u32 name length, the UTF-8 name, u32 kind tag
// (0 = conv, 1 = depthwise), the kind's u32 dims (conv: k_h, k_w, c, n;
// depthwise: k, c), u32 fraction_bits, then the raw weight bytes.

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8], ExecError> {
        if self.pos + len > self.data.len() {
            return Err(ExecError::Format(format!(
                "truncated: wanted {} bytes at offset {}, have {}",
                len,
                self.pos,
                self.data.len() - self.pos
            )));
        }
        let slice = &self.data[self.pos..self.pos + len];
        self.pos += len;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, ExecError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn finished(&self) -> bool {
        self.pos == self.data.len()
    }
}

pub fn save_tensor(t: &FxpTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + t.values().len());
    push_u32(&mut out, t.shape.h as u32);
    push_u32(&mut out, t.shape.w as u32);
    push_u32(&mut out, t.shape.c as u32);
    push_u32(&mut out, u32::from(t.fraction_bits));
    out.extend(t.values().iter().map(|&v| v as u8));
    out
}

pub fn load_tensor(data: &[u8]) -> Result<FxpTensor, ExecError> {
    let mut cur = Cursor::new(data);
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let c = cur.u32()? as usize;
    let f = cur.u32()?;
    if h == 0 || w == 0 || c == 0 {
        return Err(ExecError::Format("tensor dims must be positive".into()));
    }
    if f > 7 {
        return Err(ExecError::Format(format!("fraction_bits {f} out of range")));
    }
    let values: Vec<i8> = cur.take(h * w * c)?.iter().map(|&b| b as i8).collect();
    if !cur.finished() {
        return Err(ExecError::Format("trailing bytes after tensor values".into()));
    }
    FxpTensor::new(TensorShape { h, w, c }, f as u8, values)
        .map_err(|e| ExecError::Format(e.to_string()))
}

pub fn save_weight_store(store: &WeightStore) -> Vec<u8> {
    let mut out = Vec::new();
    push_u32(&mut out, store.entries.len() as u32);
    for (name, weights) in &store.entries {
        push_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        match weights {
            LayerWeights::Conv(k) => {
                push_u32(&mut out, 0);
                push_u32(&mut out, k.k_h as u32);
                push_u32(&mut out, k.k_w as u32);
                push_u32(&mut out, k.c as u32);
                push_u32(&mut out, k.n as u32);
                push_u32(&mut out, u32::from(k.fraction_bits));
                out.extend(k.values().iter().map(|&v| v as u8));
            }
            LayerWeights::Depthwise(k) => {
                push_u32(&mut out, 1);
                push_u32(&mut out, k.k as u32);
                push_u32(&mut out, k.c as u32);
                push_u32(&mut out, u32::from(k.fraction_bits));
                out.extend(k.values().iter().map(|&v| v as u8));
            }
        }
    }
    out
}

pub fn load_weight_store(data: &[u8]) -> Result<WeightStore, ExecError> {
    let mut cur = Cursor::new(data);
    let count = cur.u32()?;
    let mut store = WeightStore::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| ExecError::Format("layer name is not UTF-8".into()))?
            .to_string();
        let kind = cur.u32()?;
        let weights = match kind {
            0 => {
                let k_h = cur.u32()? as usize;
                let k_w = cur.u32()? as usize;
                let c = cur.u32()? as usize;
                let n = cur.u32()? as usize;
                let f = cur.u32()?;
                let values: Vec<i8> = cur.take(k_h * k_w * c * n)?.iter().map(|&b| b as i8).collect();
                LayerWeights::Conv(
                    ConvKernel::new(k_h, k_w, c, n, f as u8, values)
                        .map_err(|e| ExecError::Format(e.to_string()))?,
                )
            }
            1 => {
                let k = cur.u32()? as usize;
                let c = cur.u32()? as usize;
                let f = cur.u32()?;
                let values: Vec<i8> = cur.take(k * k * c)?.iter().map(|&b| b as i8).collect();
                LayerWeights::Depthwise(
                    DepthwiseKernel::new(k, c, f as u8, values)
                        .map_err(|e| ExecError::Format(e.to_string()))?,
                )
            }
            other => return Err(ExecError::Format(format!("unknown weight kind tag {other}"))),
        };
        store.insert(name, weights);
    }
    if !cur.finished() {
        return Err(ExecError::Format("trailing bytes after last record".into()));
    }
    Ok(store)
}
