//! Built-in graph templates for the three studied mobile CNN building
//! blocks: the fire module, the inverted bottleneck, and the two shuffle
//! unit variants.
//!
//! Default channel parameters are editable fixtures, not architecture
//! ground truth; the same graphs also ship as model files under
//! `fixtures/models/`.

use crate::graph::{GraphError, LayerSpec, ModelGraph, Padding, TensorShape, INPUT_ID};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("unknown builtin module '{0}'")]
    UnknownModule(String),
    #[error("unknown parameter '{param}' for builtin '{module}'")]
    UnknownParam { module: &'static str, param: String },
    #[error("parameter '{param}': expected {expected}, got '{value}'")]
    BadValue {
        param: &'static str,
        expected: &'static str,
        value: String,
    },
    #[error("stride must be 1 or 2, got {0}")]
    InvalidStride(usize),
    #[error("{what} must be even, got {value}")]
    OddChannels { what: &'static str, value: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Squeeze-and-expand module: pointwise squeeze feeding a pointwise and a
/// 3x3 expand branch, concatenated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FireParams {
    pub input: TensorShape,
    pub squeeze: usize,
    pub expand1x1: usize,
    pub expand3x3: usize,
}

impl Default for FireParams {
    fn default() -> Self {
        Self {
            input: TensorShape::new(56, 56, 96),
            squeeze: 16,
            expand1x1: 64,
            expand3x3: 64,
        }
    }
}

pub fn fire(p: &FireParams) -> Result<ModelGraph, TemplateError> {
    let mut g = ModelGraph::new("fire", p.input);
    g.add_node("squeeze", LayerSpec::Pointwise { n: p.squeeze }, &[INPUT_ID])?;
    g.add_node("expand1x1", LayerSpec::Pointwise { n: p.expand1x1 }, &["squeeze"])?;
    g.add_node(
        "expand3x3",
        LayerSpec::Conv {
            k_h: 3,
            k_w: 3,
            n: p.expand3x3,
            stride: 1,
            padding: Padding::Same,
            groups: 1,
        },
        &["squeeze"],
    )?;
    g.add_node("out", LayerSpec::Concat, &["expand1x1", "expand3x3"])?;
    Ok(g.infer_shapes()?)
}

/// Inverted residual: pointwise expansion, 3x3 depthwise, pointwise
/// projection, with a residual add when stride is 1 and channels match.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BottleneckParams {
    pub input: TensorShape,
    pub expand_ratio: usize,
    pub stride: usize,
    pub out_channels: usize,
}

impl Default for BottleneckParams {
    fn default() -> Self {
        Self {
            input: TensorShape::new(56, 56, 16),
            expand_ratio: 6,
            stride: 1,
            out_channels: 16,
        }
    }
}

pub fn bottleneck(p: &BottleneckParams) -> Result<ModelGraph, TemplateError> {
    if p.stride != 1 && p.stride != 2 {
        return Err(TemplateError::InvalidStride(p.stride));
    }
    let expanded = p.input.c * p.expand_ratio;
    let mut g = ModelGraph::new("bottleneck", p.input);
    g.add_node("expand", LayerSpec::Pointwise { n: expanded }, &[INPUT_ID])?;
    g.add_node(
        "depthwise",
        LayerSpec::DepthwiseConv {
            k: 3,
            stride: p.stride,
            padding: Padding::Same,
        },
        &["expand"],
    )?;
    g.add_node("project", LayerSpec::Pointwise { n: p.out_channels }, &["depthwise"])?;
    if p.stride == 1 && p.input.c == p.out_channels {
        g.add_node("residual", LayerSpec::Add, &[INPUT_ID, "project"])?;
    }
    Ok(g.infer_shapes()?)
}

/// Stride-1 shuffle unit: channel split, a pointwise/depthwise/pointwise
/// branch on one half, concat, channel shuffle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShuffleUnitParams {
    pub input: TensorShape,
}

impl Default for ShuffleUnitParams {
    fn default() -> Self {
        Self {
            input: TensorShape::new(28, 28, 48),
        }
    }
}

pub fn shufflenet_unit(p: &ShuffleUnitParams) -> Result<ModelGraph, TemplateError> {
    if !p.input.c.is_multiple_of(2) {
        return Err(TemplateError::OddChannels {
            what: "input channels",
            value: p.input.c,
        });
    }
    let half = p.input.c / 2;
    let mut g = ModelGraph::new("shufflenet_unit", p.input);
    g.add_node("pass", LayerSpec::ChannelSplit { part: 0, parts: 2 }, &[INPUT_ID])?;
    g.add_node("branch", LayerSpec::ChannelSplit { part: 1, parts: 2 }, &[INPUT_ID])?;
    g.add_node("pw1", LayerSpec::Pointwise { n: half }, &["branch"])?;
    g.add_node(
        "dw",
        LayerSpec::DepthwiseConv {
            k: 3,
            stride: 1,
            padding: Padding::Same,
        },
        &["pw1"],
    )?;
    g.add_node("pw2", LayerSpec::Pointwise { n: half }, &["dw"])?;
    g.add_node("cat", LayerSpec::Concat, &["pass", "pw2"])?;
    g.add_node("shuffle", LayerSpec::ChannelShuffle { groups: 2 }, &["cat"])?;
    Ok(g.infer_shapes()?)
}

/// Spatial-reduction shuffle unit: both branches run a stride-2 depthwise
/// conv on the full input, halving spatial dims while channels grow to
/// `out_channels`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShuffleDownParams {
    pub input: TensorShape,
    pub out_channels: usize,
}

impl Default for ShuffleDownParams {
    fn default() -> Self {
        Self {
            input: TensorShape::new(56, 56, 24),
            out_channels: 48,
        }
    }
}

pub fn shufflenet_unit_down(p: &ShuffleDownParams) -> Result<ModelGraph, TemplateError> {
    if !p.out_channels.is_multiple_of(2) {
        return Err(TemplateError::OddChannels {
            what: "out_channels",
            value: p.out_channels,
        });
    }
    let half = p.out_channels / 2;
    let dw = |stride| LayerSpec::DepthwiseConv {
        k: 3,
        stride,
        padding: Padding::Same,
    };
    let mut g = ModelGraph::new("shufflenet_unit_down", p.input);
    g.add_node("a_dw", dw(2), &[INPUT_ID])?;
    g.add_node("a_pw", LayerSpec::Pointwise { n: half }, &["a_dw"])?;
    g.add_node("b_pw1", LayerSpec::Pointwise { n: half }, &[INPUT_ID])?;
    g.add_node("b_dw", dw(2), &["b_pw1"])?;
    g.add_node("b_pw2", LayerSpec::Pointwise { n: half }, &["b_dw"])?;
    g.add_node("cat", LayerSpec::Concat, &["a_pw", "b_pw2"])?;
    g.add_node("shuffle", LayerSpec::ChannelShuffle { groups: 2 }, &["cat"])?;
    Ok(g.infer_shapes()?)
}

/// Instantiate a builtin by name with `key=value` overrides, as accepted by
/// the CLI's `--model builtin:<name>[:k=v,...]` syntax. Integer keys are the
/// parameter struct fields; `input` takes `HxWxC`.
pub fn builtin_module(name: &str, overrides: &str) -> Result<ModelGraph, TemplateError> {
    let pairs: Vec<(&str, &str)> = overrides
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|kv| kv.split_once('=').ok_or(kv))
        .collect::<Result<_, _>>()
        .map_err(|kv| TemplateError::BadValue {
            param: "override",
            expected: "key=value",
            value: kv.to_string(),
        })?;

    let parse_int = |param: &'static str, v: &str| -> Result<usize, TemplateError> {
        v.parse().map_err(|_| TemplateError::BadValue {
            param,
            expected: "positive integer",
            value: v.to_string(),
        })
    };
    let parse_shape = |v: &str| -> Result<TensorShape, TemplateError> {
        let dims: Vec<usize> = v
            .split('x')
            .map(|d| parse_int("input", d))
            .collect::<Result<_, _>>()?;
        if dims.len() != 3 || dims.contains(&0) {
            return Err(TemplateError::BadValue {
                param: "input",
                expected: "HxWxC",
                value: v.to_string(),
            });
        }
        Ok(TensorShape::new(dims[0], dims[1], dims[2]))
    };

    match name {
        "fire" => {
            let mut p = FireParams::default();
            for (k, v) in pairs {
                match k {
                    "input" => p.input = parse_shape(v)?,
                    "squeeze" => p.squeeze = parse_int("squeeze", v)?,
                    "expand1x1" => p.expand1x1 = parse_int("expand1x1", v)?,
                    "expand3x3" => p.expand3x3 = parse_int("expand3x3", v)?,
                    other => {
                        return Err(TemplateError::UnknownParam {
                            module: "fire",
                            param: other.to_string(),
                        })
                    }
                }
            }
            fire(&p)
        }
        "bottleneck" => {
            let mut p = BottleneckParams::default();
            for (k, v) in pairs {
                match k {
                    "input" => p.input = parse_shape(v)?,
                    "expand_ratio" => p.expand_ratio = parse_int("expand_ratio", v)?,
                    "stride" => p.stride = parse_int("stride", v)?,
                    "out_channels" => p.out_channels = parse_int("out_channels", v)?,
                    other => {
                        return Err(TemplateError::UnknownParam {
                            module: "bottleneck",
                            param: other.to_string(),
                        })
                    }
                }
            }
            bottleneck(&p)
        }
        "shufflenet_unit" => {
            let mut p = ShuffleUnitParams::default();
            for (k, v) in pairs {
                match k {
                    "input" => p.input = parse_shape(v)?,
                    other => {
                        return Err(TemplateError::UnknownParam {
                            module: "shufflenet_unit",
                            param: other.to_string(),
                        })
                    }
                }
            }
            shufflenet_unit(&p)
        }
        "shufflenet_unit_down" => {
            let mut p = ShuffleDownParams::default();
            for (k, v) in pairs {
                match k {
                    "input" => p.input = parse_shape(v)?,
                    "out_channels" => p.out_channels = parse_int("out_channels", v)?,
                    other => {
                        return Err(TemplateError::UnknownParam {
                            module: "shufflenet_unit_down",
                            param: other.to_string(),
                        })
                    }
                }
            }
            shufflenet_unit_down(&p)
        }
        other => Err(TemplateError::UnknownModule(other.to_string())),
    }
}
