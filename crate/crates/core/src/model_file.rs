//! Plain-text model description format.
//!
//! A model file is line-oriented. Blank lines and `#` comments are ignored.
//! The first significant line may name the model, the next declares the
//! input shape, and every following line adds one node:
//!
//! ```text
//! name fire
//! input 56x56x96
//! squeeze   pointwise n=16 from=input
//! expand1x1 pointwise n=64 from=squeeze
//! expand3x3 conv k=3x3 n=64 stride=1 pad=same groups=1 from=squeeze
//! out       concat from=expand1x1,expand3x3
//! ```
//!
//! Node lines are `<id> <kind> [key=value ...] from=<id>[,<id>...]`. The
//! reserved id `input` refers to the graph input. Predecessors must be
//! declared earlier in the file, so a well-formed file is always acyclic
//! and in topological order. Kinds and their keys:
//!
//! | kind      | keys                                            |
//! |-----------|-------------------------------------------------|
//! | conv      | k=KxK or k=K, n, stride (1), pad (same), groups (1) |
//! | dwconv    | k, stride (1), pad (same)                       |
//! | pointwise | n                                               |
//! | maxpool   | k, stride (1), pad (same)                       |
//! | avgpool   | k, stride (1), pad (same)                       |
//! | concat    | -                                               |
//! | add       | -                                               |
//! | split     | part, of                                        |
//! | shuffle   | groups                                          |
//!
//! [`serialize_model`] writes every key explicitly; `parse_model ∘
//! serialize_model` is the identity on shape-inferred graphs.

use crate::graph::{GraphError, LayerSpec, ModelGraph, Padding, TensorShape, INPUT_ID};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: {source}")]
    Semantic {
        line: usize,
        #[source]
        source: GraphError,
    },
    #[error("{0}")]
    Graph(#[from] GraphError),
    #[error("model file declares no input shape")]
    MissingInput,
}

fn syntax(line: usize, msg: impl Into<String>) -> ModelFileError {
    ModelFileError::Syntax {
        line,
        msg: msg.into(),
    }
}

struct Params<'a> {
    line: usize,
    map: BTreeMap<&'a str, &'a str>,
}

impl<'a> Params<'a> {
    fn take(&mut self, key: &str) -> Option<&'a str> {
        self.map.remove(key)
    }

    fn require(&mut self, key: &str) -> Result<&'a str, ModelFileError> {
        self.take(key)
            .ok_or_else(|| syntax(self.line, format!("missing required parameter '{key}'")))
    }

    fn usize_or(&mut self, key: &str, default: usize) -> Result<usize, ModelFileError> {
        match self.take(key) {
            Some(v) => parse_usize(self.line, key, v),
            None => Ok(default),
        }
    }

    fn require_usize(&mut self, key: &str) -> Result<usize, ModelFileError> {
        let v = self.require(key)?;
        parse_usize(self.line, key, v)
    }

    fn padding_or(&mut self, default: Padding) -> Result<Padding, ModelFileError> {
        match self.take("pad") {
            Some("same") => Ok(Padding::Same),
            Some("valid") => Ok(Padding::Valid),
            Some(other) => Err(syntax(self.line, format!("pad must be same|valid, got '{other}'"))),
            None => Ok(default),
        }
    }

    fn finish(self) -> Result<(), ModelFileError> {
        if let Some(key) = self.map.keys().next() {
            return Err(syntax(self.line, format!("unknown parameter '{key}'")));
        }
        Ok(())
    }
}

fn parse_usize(line: usize, key: &str, v: &str) -> Result<usize, ModelFileError> {
    v.parse::<usize>()
        .map_err(|_| syntax(line, format!("parameter '{key}' must be a nonnegative integer, got '{v}'")))
}

fn parse_shape(line: usize, text: &str) -> Result<TensorShape, ModelFileError> {
    let dims: Vec<&str> = text.split('x').collect();
    if dims.len() != 3 {
        return Err(syntax(line, format!("expected HxWxC, got '{text}'")));
    }
    let h = parse_usize(line, "h", dims[0])?;
    let w = parse_usize(line, "w", dims[1])?;
    let c = parse_usize(line, "c", dims[2])?;
    if h == 0 || w == 0 || c == 0 {
        return Err(syntax(line, "shape dims must be positive"));
    }
    Ok(TensorShape { h, w, c })
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-' || ch == '.')
}

/// Parse a model document into a validated, shape-inferred graph.
pub fn parse_model(text: &str) -> Result<ModelGraph, ModelFileError> {
    let mut name: Option<String> = None;
    let mut graph: Option<ModelGraph> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let first = tokens.next().expect("nonempty line has a token");

        if first == "name" && graph.is_none() {
            let rest: Vec<&str> = tokens.collect();
            if rest.len() != 1 {
                return Err(syntax(line_no, "expected: name <identifier>"));
            }
            name = Some(rest[0].to_string());
            continue;
        }
        if first == "input" {
            if graph.is_some() {
                return Err(syntax(line_no, "duplicate input declaration"));
            }
            let rest: Vec<&str> = tokens.collect();
            if rest.len() != 1 {
                return Err(syntax(line_no, "expected: input HxWxC"));
            }
            let shape = parse_shape(line_no, rest[0])?;
            graph = Some(ModelGraph::new(
                name.clone().unwrap_or_else(|| "model".to_string()),
                shape,
            ));
            continue;
        }

        let graph = graph.as_mut().ok_or(ModelFileError::MissingInput)?;
        let id = first;
        if !valid_id(id) || id == INPUT_ID {
            return Err(syntax(line_no, format!("invalid node id '{id}'")));
        }
        let kind = tokens
            .next()
            .ok_or_else(|| syntax(line_no, "missing layer kind"))?;

        let mut map = BTreeMap::new();
        let mut from: Option<&str> = None;
        for tok in tokens {
            let (key, value) = tok
                .split_once('=')
                .ok_or_else(|| syntax(line_no, format!("expected key=value, got '{tok}'")))?;
            if key == "from" {
                from = Some(value);
            } else if map.insert(key, value).is_some() {
                return Err(syntax(line_no, format!("duplicate parameter '{key}'")));
            }
        }
        let mut params = Params { line: line_no, map };

        let spec = match kind {
            "conv" => {
                let k = params.require("k")?;
                let (k_h, k_w) = match k.split_once('x') {
                    Some((a, b)) => (parse_usize(line_no, "k", a)?, parse_usize(line_no, "k", b)?),
                    None => {
                        let v = parse_usize(line_no, "k", k)?;
                        (v, v)
                    }
                };
                LayerSpec::Conv {
                    k_h,
                    k_w,
                    n: params.require_usize("n")?,
                    stride: params.usize_or("stride", 1)?,
                    padding: params.padding_or(Padding::Same)?,
                    groups: params.usize_or("groups", 1)?,
                }
            }
            "dwconv" => LayerSpec::DepthwiseConv {
                k: params.require_usize("k")?,
                stride: params.usize_or("stride", 1)?,
                padding: params.padding_or(Padding::Same)?,
            },
            "pointwise" => LayerSpec::Pointwise {
                n: params.require_usize("n")?,
            },
            "maxpool" => LayerSpec::MaxPool {
                k: params.require_usize("k")?,
                stride: params.usize_or("stride", 1)?,
                padding: params.padding_or(Padding::Same)?,
            },
            "avgpool" => LayerSpec::AvgPool {
                k: params.require_usize("k")?,
                stride: params.usize_or("stride", 1)?,
                padding: params.padding_or(Padding::Same)?,
            },
            "concat" => LayerSpec::Concat,
            "add" => LayerSpec::Add,
            "split" => LayerSpec::ChannelSplit {
                part: params.require_usize("part")?,
                parts: params.require_usize("of")?,
            },
            "shuffle" => LayerSpec::ChannelShuffle {
                groups: params.require_usize("groups")?,
            },
            other => return Err(syntax(line_no, format!("unknown layer kind '{other}'"))),
        };
        params.finish()?;

        let from = from.ok_or_else(|| syntax(line_no, "missing from=<predecessors>"))?;
        let preds: Vec<&str> = from.split(',').filter(|s| !s.is_empty()).collect();
        if preds.is_empty() {
            return Err(syntax(line_no, "from= lists no predecessors"));
        }
        graph
            .add_node(id, spec, &preds)
            .map_err(|e| ModelFileError::Semantic {
                line: line_no,
                source: e,
            })?;
    }

    let graph = graph.ok_or(ModelFileError::MissingInput)?;
    Ok(graph.infer_shapes()?)
}

/// Serialize a graph in the model file format. Every parameter is written
/// explicitly so the output re-parses to an identical graph.
pub fn serialize_model(graph: &ModelGraph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "name {}", graph.name);
    let _ = writeln!(out, "input {}", graph.input_shape);
    for node in graph.nodes() {
        let preds: Vec<String> = node
            .inputs
            .iter()
            .map(|p| match p {
                crate::graph::PortRef::GraphInput => INPUT_ID.to_string(),
                crate::graph::PortRef::Node(i) => graph.nodes()[*i].id.clone(),
            })
            .collect();
        let from = preds.join(",");
        let line = match &node.spec {
            LayerSpec::Conv {
                k_h,
                k_w,
                n,
                stride,
                padding,
                groups,
            } => format!(
                "{} conv k={}x{} n={} stride={} pad={} groups={} from={}",
                node.id, k_h, k_w, n, stride, padding, groups, from
            ),
            LayerSpec::DepthwiseConv { k, stride, padding } => format!(
                "{} dwconv k={} stride={} pad={} from={}",
                node.id, k, stride, padding, from
            ),
            LayerSpec::Pointwise { n } => format!("{} pointwise n={} from={}", node.id, n, from),
            LayerSpec::MaxPool { k, stride, padding } => format!(
                "{} maxpool k={} stride={} pad={} from={}",
                node.id, k, stride, padding, from
            ),
            LayerSpec::AvgPool { k, stride, padding } => format!(
                "{} avgpool k={} stride={} pad={} from={}",
                node.id, k, stride, padding, from
            ),
            LayerSpec::Concat => format!("{} concat from={}", node.id, from),
            LayerSpec::Add => format!("{} add from={}", node.id, from),
            LayerSpec::ChannelSplit { part, parts } => {
                format!("{} split part={} of={} from={}", node.id, part, parts, from)
            }
            LayerSpec::ChannelShuffle { groups } => {
                format!("{} shuffle groups={} from={}", node.id, groups, from)
            }
        };
        let _ = writeln!(out, "{line}");
    }
    out
}
