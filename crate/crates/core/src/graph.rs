//! CNN graph representation: layer operators, shape inference, and per-layer
//! work/weight accounting.
//!
//! A [`ModelGraph`] is a DAG of layer nodes in topological order. Construction
//! only accepts references to already-added nodes (or the graph input), so a
//! built graph is acyclic and topologically ordered by construction. Graphs
//! are immutable once built; [`ModelGraph::infer_shapes`] returns a new,
//! annotated graph.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Height x width x channels of a feature map. Elements are 8-bit, so the
/// byte size of a tensor equals its element count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl TensorShape {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        assert!(h >= 1 && w >= 1 && c >= 1, "tensor dims must be positive");
        Self { h, w, c }
    }

    /// Number of elements (= bytes, 8-bit elements).
    pub fn elements(&self) -> usize {
        self.h * self.w * self.c
    }

    /// Size in bytes when stored as one byte per element.
    pub fn byte_size(&self) -> u64 {
        self.elements() as u64
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

/// Spatial padding convention for windowed operators.
///
/// `Same` with stride `s` yields `ceil(in / s)` output positions, padding
/// with zeros as needed (extra padding goes to the bottom/right). `Valid`
/// yields `floor((in - k) / s) + 1` and never pads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

impl fmt::Display for Padding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Padding::Same => write!(f, "same"),
            Padding::Valid => write!(f, "valid"),
        }
    }
}

/// A layer operator together with its hyper-parameters.
///
/// `Pointwise` is semantically `Conv` with a 1x1 kernel, stride 1 and a
/// single group; it is kept distinct because the two are costed differently
/// by device calibration. `ChannelSplit` selects one of `parts` equal
/// channel slices of its input, so a full split is expressed as `parts`
/// sibling nodes sharing a predecessor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        k_h: usize,
        k_w: usize,
        n: usize,
        stride: usize,
        padding: Padding,
        groups: usize,
    },
    DepthwiseConv {
        k: usize,
        stride: usize,
        padding: Padding,
    },
    Pointwise {
        n: usize,
    },
    MaxPool {
        k: usize,
        stride: usize,
        padding: Padding,
    },
    AvgPool {
        k: usize,
        stride: usize,
        padding: Padding,
    },
    Concat,
    Add,
    ChannelSplit {
        part: usize,
        parts: usize,
    },
    ChannelShuffle {
        groups: usize,
    },
}

impl LayerSpec {
    /// Short lower-case operator name, as used in model files and
    /// calibration tables.
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::DepthwiseConv { .. } => "dwconv",
            LayerSpec::Pointwise { .. } => "pointwise",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::Concat => "concat",
            LayerSpec::Add => "add",
            LayerSpec::ChannelSplit { .. } => "split",
            LayerSpec::ChannelShuffle { .. } => "shuffle",
        }
    }

    /// True for operators that carry weights and perform MACs.
    pub fn is_parametric(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. } | LayerSpec::DepthwiseConv { .. } | LayerSpec::Pointwise { .. }
        )
    }
}

/// Reference to a node input: either the graph input tensor or an earlier
/// node's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PortRef {
    GraphInput,
    Node(usize),
}

/// One layer in the graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub spec: LayerSpec,
    pub inputs: Vec<PortRef>,
}

/// Reserved id that refers to the graph input in model files and
/// predecessor lists.
pub const INPUT_ID: &str = "input";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ShapeError {
    #[error("expected {expected} input(s), got {got}")]
    InputArity { expected: &'static str, got: usize },
    #[error("kernel {k} exceeds input extent {extent} under valid padding")]
    KernelExceedsInput { k: usize, extent: usize },
    #[error("groups {groups} must divide channels {channels}")]
    GroupsDivide { groups: usize, channels: usize },
    #[error("add inputs must have identical shapes: {a} vs {b}")]
    AddMismatch { a: TensorShape, b: TensorShape },
    #[error("concat inputs must share spatial dims: {a} vs {b}")]
    ConcatSpatial { a: TensorShape, b: TensorShape },
    #[error("split into {parts} parts must divide channels {channels}")]
    SplitDivide { parts: usize, channels: usize },
    #[error("split part {part} out of range for {parts} parts")]
    SplitPart { part: usize, parts: usize },
    #[error("parameter must be positive: {0}")]
    NonPositive(&'static str),
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("duplicate node id '{0}'")]
    DuplicateId(String),
    #[error("node '{node}' references undefined predecessor '{pred}'")]
    UnknownPredecessor { node: String, pred: String },
    #[error("node '{node}': {source}")]
    Shape {
        node: String,
        #[source]
        source: ShapeError,
    },
    #[error("unknown node id '{0}'")]
    UnknownNode(String),
}

/// Directed acyclic graph of CNN layers.
///
/// Nodes are stored in topological order. The graph output is the last node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub name: String,
    pub input_shape: TensorShape,
    nodes: Vec<Node>,
    /// Per-node output shapes, populated by `infer_shapes`.
    output_shapes: Option<Vec<TensorShape>>,
}

impl ModelGraph {
    pub fn new(name: impl Into<String>, input_shape: TensorShape) -> Self {
        Self {
            name: name.into(),
            input_shape,
            nodes: Vec::new(),
            output_shapes: None,
        }
    }

    /// Append a node whose predecessors are named by id (`"input"` for the
    /// graph input). Predecessors must already exist, which keeps the node
    /// list topologically ordered and the graph acyclic.
    pub fn add_node(
        &mut self,
        id: impl Into<String>,
        spec: LayerSpec,
        preds: &[&str],
    ) -> Result<usize, GraphError> {
        let id = id.into();
        if id == INPUT_ID || self.nodes.iter().any(|n| n.id == id) {
            return Err(GraphError::DuplicateId(id));
        }
        let mut inputs = Vec::with_capacity(preds.len());
        for pred in preds {
            if *pred == INPUT_ID {
                inputs.push(PortRef::GraphInput);
            } else {
                let idx = self
                    .nodes
                    .iter()
                    .position(|n| n.id == *pred)
                    .ok_or_else(|| GraphError::UnknownPredecessor {
                        node: id.clone(),
                        pred: pred.to_string(),
                    })?;
                inputs.push(PortRef::Node(idx));
            }
        }
        self.nodes.push(Node { id, spec, inputs });
        self.output_shapes = None;
        Ok(self.nodes.len() - 1)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_index(&self, id: &str) -> Result<usize, GraphError> {
        self.nodes
            .iter()
            .position(|n| n.id == id)
            .ok_or_else(|| GraphError::UnknownNode(id.to_string()))
    }

    /// Shape flowing into the given port.
    pub fn port_shape(&self, port: PortRef) -> Option<TensorShape> {
        match port {
            PortRef::GraphInput => Some(self.input_shape),
            PortRef::Node(i) => self.output_shapes.as_ref().map(|s| s[i]),
        }
    }

    /// Inferred output shape of node `idx` (requires `infer_shapes`).
    pub fn output_shape(&self, idx: usize) -> Option<TensorShape> {
        self.output_shapes.as_ref().map(|s| s[idx])
    }

    /// Shape of the first input of node `idx` (requires `infer_shapes` when
    /// the input is another node).
    pub fn node_input_shape(&self, idx: usize) -> Option<TensorShape> {
        self.port_shape(*self.nodes[idx].inputs.first()?)
    }

    /// Indices of nodes consuming the output of node `idx`.
    pub fn consumers(&self, idx: usize) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.inputs.contains(&PortRef::Node(idx)))
            .map(|(i, _)| i)
            .collect()
    }

    /// True once shape inference has run.
    pub fn shapes_inferred(&self) -> bool {
        self.output_shapes.is_some()
    }

    /// Annotate every node with its output shape. Deterministic and
    /// idempotent; fails on shape rule violations.
    pub fn infer_shapes(&self) -> Result<ModelGraph, GraphError> {
        let mut shapes: Vec<TensorShape> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let input_shapes: Vec<TensorShape> = node
                .inputs
                .iter()
                .map(|p| match p {
                    PortRef::GraphInput => self.input_shape,
                    PortRef::Node(i) => shapes[*i],
                })
                .collect();
            let out = output_shape(&node.spec, &input_shapes).map_err(|e| GraphError::Shape {
                node: node.id.clone(),
                source: e,
            })?;
            shapes.push(out);
        }
        Ok(ModelGraph {
            name: self.name.clone(),
            input_shape: self.input_shape,
            nodes: self.nodes.clone(),
            output_shapes: Some(shapes),
        })
    }
}

/// Output length of a windowed op along one spatial axis.
pub fn window_extent(input: usize, k: usize, stride: usize, padding: Padding) -> Result<usize, ShapeError> {
    if stride == 0 {
        return Err(ShapeError::NonPositive("stride"));
    }
    if k == 0 {
        return Err(ShapeError::NonPositive("kernel"));
    }
    match padding {
        Padding::Same => Ok(input.div_ceil(stride)),
        Padding::Valid => {
            if k > input {
                Err(ShapeError::KernelExceedsInput { k, extent: input })
            } else {
                Ok((input - k) / stride + 1)
            }
        }
    }
}

/// Shape rule for a single operator applied to its input shapes.
pub fn output_shape(spec: &LayerSpec, inputs: &[TensorShape]) -> Result<TensorShape, ShapeError> {
    let unary = |inputs: &[TensorShape]| -> Result<TensorShape, ShapeError> {
        if inputs.len() != 1 {
            return Err(ShapeError::InputArity {
                expected: "exactly 1",
                got: inputs.len(),
            });
        }
        Ok(inputs[0])
    };
    match *spec {
        LayerSpec::Conv {
            k_h,
            k_w,
            n,
            stride,
            padding,
            groups,
        } => {
            let i = unary(inputs)?;
            if n == 0 {
                return Err(ShapeError::NonPositive("n"));
            }
            if groups == 0 {
                return Err(ShapeError::NonPositive("groups"));
            }
            if !i.c.is_multiple_of(groups) {
                return Err(ShapeError::GroupsDivide { groups, channels: i.c });
            }
            if !n.is_multiple_of(groups) {
                return Err(ShapeError::GroupsDivide { groups, channels: n });
            }
            let h = window_extent(i.h, k_h, stride, padding)?;
            let w = window_extent(i.w, k_w, stride, padding)?;
            Ok(TensorShape { h, w, c: n })
        }
        LayerSpec::DepthwiseConv { k, stride, padding } => {
            let i = unary(inputs)?;
            let h = window_extent(i.h, k, stride, padding)?;
            let w = window_extent(i.w, k, stride, padding)?;
            Ok(TensorShape { h, w, c: i.c })
        }
        LayerSpec::Pointwise { n } => {
            let i = unary(inputs)?;
            if n == 0 {
                return Err(ShapeError::NonPositive("n"));
            }
            Ok(TensorShape { h: i.h, w: i.w, c: n })
        }
        LayerSpec::MaxPool { k, stride, padding } | LayerSpec::AvgPool { k, stride, padding } => {
            let i = unary(inputs)?;
            let h = window_extent(i.h, k, stride, padding)?;
            let w = window_extent(i.w, k, stride, padding)?;
            Ok(TensorShape { h, w, c: i.c })
        }
        LayerSpec::Concat => {
            if inputs.len() < 2 {
                return Err(ShapeError::InputArity {
                    expected: "at least 2",
                    got: inputs.len(),
                });
            }
            let first = inputs[0];
            let mut c = 0;
            for s in inputs {
                if s.h != first.h || s.w != first.w {
                    return Err(ShapeError::ConcatSpatial { a: first, b: *s });
                }
                c += s.c;
            }
            Ok(TensorShape { h: first.h, w: first.w, c })
        }
        LayerSpec::Add => {
            if inputs.len() < 2 {
                return Err(ShapeError::InputArity {
                    expected: "at least 2",
                    got: inputs.len(),
                });
            }
            let first = inputs[0];
            for s in &inputs[1..] {
                if *s != first {
                    return Err(ShapeError::AddMismatch { a: first, b: *s });
                }
            }
            Ok(first)
        }
        LayerSpec::ChannelSplit { part, parts } => {
            let i = unary(inputs)?;
            if parts < 2 {
                return Err(ShapeError::NonPositive("parts"));
            }
            if part >= parts {
                return Err(ShapeError::SplitPart { part, parts });
            }
            if !i.c.is_multiple_of(parts) {
                return Err(ShapeError::SplitDivide { parts, channels: i.c });
            }
            Ok(TensorShape {
                h: i.h,
                w: i.w,
                c: i.c / parts,
            })
        }
        LayerSpec::ChannelShuffle { groups } => {
            let i = unary(inputs)?;
            if groups == 0 {
                return Err(ShapeError::NonPositive("groups"));
            }
            if !i.c.is_multiple_of(groups) {
                return Err(ShapeError::GroupsDivide { groups, channels: i.c });
            }
            Ok(i)
        }
    }
}

/// Multiply-accumulate count of one layer application.
///
/// Conv: `H_O * W_O * k_h * k_w * (C_I / groups) * N`; depthwise:
/// `H_O * W_O * k * k * C_I`; pointwise: `H * W * C_I * N`. Padded taps
/// count (the multiply happens against a zero). Non-parametric layers
/// perform no MACs.
pub fn mac_count(spec: &LayerSpec, in_shape: TensorShape) -> u64 {
    match *spec {
        LayerSpec::Conv {
            k_h,
            k_w,
            n,
            stride,
            padding,
            groups,
        } => {
            let oh = window_extent(in_shape.h, k_h, stride, padding).unwrap_or(0);
            let ow = window_extent(in_shape.w, k_w, stride, padding).unwrap_or(0);
            if groups == 0 || !in_shape.c.is_multiple_of(groups) {
                return 0;
            }
            (oh * ow * k_h * k_w * (in_shape.c / groups) * n) as u64
        }
        LayerSpec::DepthwiseConv { k, stride, padding } => {
            let oh = window_extent(in_shape.h, k, stride, padding).unwrap_or(0);
            let ow = window_extent(in_shape.w, k, stride, padding).unwrap_or(0);
            (oh * ow * k * k * in_shape.c) as u64
        }
        LayerSpec::Pointwise { n } => (in_shape.h * in_shape.w * in_shape.c * n) as u64,
        _ => 0,
    }
}

/// Weight footprint of one layer in bytes (8-bit weights, biases excluded).
pub fn weight_bytes(spec: &LayerSpec, in_shape: TensorShape) -> u64 {
    match *spec {
        LayerSpec::Conv {
            k_h, k_w, n, groups, ..
        } => {
            if groups == 0 || !in_shape.c.is_multiple_of(groups) {
                return 0;
            }
            (k_h * k_w * (in_shape.c / groups) * n) as u64
        }
        LayerSpec::DepthwiseConv { k, .. } => (k * k * in_shape.c) as u64,
        LayerSpec::Pointwise { n } => (in_shape.c * n) as u64,
        _ => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(k: usize, n: usize, stride: usize, padding: Padding, groups: usize) -> LayerSpec {
        LayerSpec::Conv {
            k_h: k,
            k_w: k,
            n,
            stride,
            padding,
            groups,
        }
    }

    /// Independent oracle: count multiplies by actually walking every output
    /// position and kernel tap.
    fn loop_mac_counter(spec: &LayerSpec, in_shape: TensorShape) -> u64 {
        let (k_h, k_w, n, stride, padding, groups) = match *spec {
            LayerSpec::Conv {
                k_h,
                k_w,
                n,
                stride,
                padding,
                groups,
            } => (k_h, k_w, n, stride, padding, groups),
            LayerSpec::DepthwiseConv { k, stride, padding } => {
                (k, k, in_shape.c, stride, padding, in_shape.c)
            }
            LayerSpec::Pointwise { n } => (1, 1, n, 1, Padding::Same, 1),
            _ => return 0,
        };
        let oh = match window_extent(in_shape.h, k_h, stride, padding) {
            Ok(v) => v,
            Err(_) => return 0,
        };
        let ow = match window_extent(in_shape.w, k_w, stride, padding) {
            Ok(v) => v,
            Err(_) => return 0,
        };
        let c_per_group = in_shape.c / groups;
        let mut count = 0u64;
        for _y in 0..oh {
            for _x in 0..ow {
                for _n in 0..n {
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
    fn same_padding_preserves_spatial_dims() {
        let s = output_shape(
            &conv(3, 64, 1, Padding::Same, 1),
            &[TensorShape::new(224, 224, 3)],
        )
        .unwrap();
        assert_eq!(s, TensorShape::new(224, 224, 64));
    }

    #[test]
    fn same_padding_stride_two_halves_dims() {
        let s = output_shape(
            &conv(3, 24, 2, Padding::Same, 1),
            &[TensorShape::new(224, 224, 3)],
        )
        .unwrap();
        assert_eq!(s, TensorShape::new(112, 112, 24));
    }

    #[test]
    fn valid_padding_formula() {
        let s = output_shape(
            &conv(5, 8, 2, Padding::Valid, 1),
            &[TensorShape::new(11, 11, 2)],
        )
        .unwrap();
        // floor((11 - 5) / 2) + 1 = 4
        assert_eq!(s, TensorShape::new(4, 4, 8));
    }

    #[test]
    fn add_shape_mismatch_rejected() {
        let err = output_shape(
            &LayerSpec::Add,
            &[TensorShape::new(56, 56, 16), TensorShape::new(56, 56, 24)],
        )
        .unwrap_err();
        assert!(matches!(err, ShapeError::AddMismatch { .. }));
    }

    #[test]
    fn valid_kernel_larger_than_input_rejected() {
        let err = output_shape(&conv(5, 4, 1, Padding::Valid, 1), &[TensorShape::new(4, 4, 2)])
            .unwrap_err();
        assert!(matches!(err, ShapeError::KernelExceedsInput { .. }));
    }

    #[test]
    fn mac_count_small_conv() {
        // 4x4x2 input, k=3 same stride 1, n=3: 4*4*3*3*2*3 = 864
        let spec = conv(3, 3, 1, Padding::Same, 1);
        let shape = TensorShape::new(4, 4, 2);
        assert_eq!(mac_count(&spec, shape), 864);
        assert_eq!(loop_mac_counter(&spec, shape), 864);
    }

    #[test]
    fn mac_count_first_layer_stride_two() {
        let spec = conv(3, 24, 2, Padding::Same, 1);
        let shape = TensorShape::new(224, 224, 3);
        assert_eq!(mac_count(&spec, shape), 8_128_512);
    }

    #[test]
    fn mac_count_zero_for_nonparametric() {
        assert_eq!(mac_count(&LayerSpec::Concat, TensorShape::new(8, 8, 8)), 0);
        assert_eq!(
            mac_count(
                &LayerSpec::MaxPool {
                    k: 2,
                    stride: 2,
                    padding: Padding::Valid
                },
                TensorShape::new(8, 8, 8)
            ),
            0
        );
    }

    #[test]
    fn mac_count_matches_loop_counter_sweep() {
        // Small sweep here; the exhaustive sweep lives in the acceptance suite.
        for h in [1usize, 3, 5, 8] {
            for c in [1usize, 2, 4] {
                for k in [1usize, 3, 5] {
                    for stride in [1usize, 2] {
                        for padding in [Padding::Same, Padding::Valid] {
                            let shape = TensorShape::new(h, h, c);
                            let spec = conv(k, 3, stride, padding, 1);
                            if output_shape(&spec, &[shape]).is_err() {
                                continue;
                            }
                            assert_eq!(
                                mac_count(&spec, shape),
                                loop_mac_counter(&spec, shape),
                                "h={h} c={c} k={k} s={stride} {padding}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn grouped_macs_divide_evenly() {
        let shape = TensorShape::new(8, 8, 4);
        let whole = mac_count(&conv(3, 4, 1, Padding::Same, 1), shape);
        let grouped = mac_count(&conv(3, 4, 1, Padding::Same, 2), shape);
        assert_eq!(grouped, whole / 2);
    }

    #[test]
    fn weight_bytes_examples() {
        assert_eq!(
            weight_bytes(&conv(3, 64, 1, Padding::Same, 1), TensorShape::new(224, 224, 3)),
            1728
        );
        assert_eq!(
            weight_bytes(&LayerSpec::Pointwise { n: 16 }, TensorShape::new(8, 8, 16)),
            256
        );
        assert_eq!(
            weight_bytes(
                &LayerSpec::MaxPool {
                    k: 2,
                    stride: 2,
                    padding: Padding::Valid
                },
                TensorShape::new(8, 8, 16)
            ),
            0
        );
    }

    #[test]
    fn shape_inference_is_idempotent() {
        let mut g = ModelGraph::new("t", TensorShape::new(16, 16, 8));
        g.add_node("c1", conv(3, 8, 1, Padding::Same, 1), &[INPUT_ID]).unwrap();
        g.add_node("p1", LayerSpec::MaxPool { k: 2, stride: 2, padding: Padding::Valid }, &["c1"])
            .unwrap();
        let once = g.infer_shapes().unwrap();
        let twice = once.infer_shapes().unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.output_shape(1), Some(TensorShape::new(8, 8, 8)));
    }

    #[test]
    fn dangling_predecessor_rejected() {
        let mut g = ModelGraph::new("t", TensorShape::new(8, 8, 3));
        let err = g.add_node("c1", conv(3, 8, 1, Padding::Same, 1), &["ghost"]).unwrap_err();
        assert!(matches!(err, GraphError::UnknownPredecessor { .. }));
    }

    #[test]
    fn channel_conservation_split_concat() {
        let input = TensorShape::new(8, 8, 6);
        let a = output_shape(&LayerSpec::ChannelSplit { part: 0, parts: 2 }, &[input]).unwrap();
        let b = output_shape(&LayerSpec::ChannelSplit { part: 1, parts: 2 }, &[input]).unwrap();
        assert_eq!(a.c + b.c, input.c);
        let cat = output_shape(&LayerSpec::Concat, &[a, b]).unwrap();
        assert_eq!(cat.c, input.c);
        let shuffled = output_shape(&LayerSpec::ChannelShuffle { groups: 2 }, &[cat]).unwrap();
        assert_eq!(shuffled, cat);
    }
}
