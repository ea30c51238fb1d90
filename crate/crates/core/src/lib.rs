//! Heterogeneous FPGA-GPU partition planning and cost simulation for
//! quantized mobile-CNN inference.
//!
//! The crate models a board pairing an embedded GPU with a small FPGA that
//! maps CNN layers directly onto logic as a static streaming pipeline. It
//! decides, per layer, how to split work between the two devices, simulates
//! latency and energy including interconnect transfers, and proves that the
//! partitioned graph computes bit-identical results through an 8-bit
//! fixed-point execution engine.
//!
//! Module map:
//! - [`graph`]: CNN graph IR, shape inference, MAC/weight accounting
//! - [`model_file`]: plain-text model description format
//! - [`templates`]: fire / bottleneck / shuffle-unit builtins
//! - [`fxp`]: bit-exact 8-bit fixed-point kernels
//! - [`exec`]: graph and plan execution, binary tensor formats
//! - [`cost`]: FPGA, GPU-calibration and link cost models
//! - [`plan`]: partition decisions and plan validation
//! - [`planner`]: minimum-cost plan search
//! - [`sim`]: stage scheduling, cost reports, gain factors
//! - [`synth`]: seeded generators for randomized verification

pub mod cost;
pub mod exec;
pub mod fxp;
pub mod graph;
pub mod model_file;
pub mod plan;
pub mod planner;
pub mod sim;
pub mod synth;
pub mod templates;

pub use cost::{DeviceModels, FpgaModel, GpuCalibrationTable, LinkModel};
pub use exec::{execute_graph, execute_plan, WeightStore};
pub use fxp::FxpTensor;
pub use graph::{LayerSpec, ModelGraph, TensorShape};
pub use plan::{Objective, PartitionDecision, PartitionPlan};
pub use planner::{optimize, PlannerOptions};
pub use sim::{baseline_gpu_only, compare, simulate, CostReport, SimOptions};
