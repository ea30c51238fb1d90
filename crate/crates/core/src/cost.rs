//! Device cost models: a parametric direct-mapped FPGA pipeline, a
//! calibration-table GPU model, and the interconnect link.
//!
//! The FPGA model reflects a statically mapped streaming pipeline: one
//! physical multiplier per kernel tap across all filters, weights and line
//! buffers resident on chip, and a throughput of one input pixel per clock.
//! The GPU model is measurement-shaped: a table of per-layer latency/power
//! rows interpolated in total MAC count. The link is bandwidth plus a fixed
//! per-transfer setup latency.

use crate::graph::{mac_count, weight_bytes, LayerSpec, TensorShape};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("layer needs {needed} multipliers, FPGA budget is {budget}")]
    Infeasible { needed: u64, budget: u64 },
    #[error("calibration has no rows for op_kind '{0}'")]
    OpKindMissing(String),
    #[error("calibration row {row}: {msg}")]
    CalibrationRow { row: usize, msg: String },
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("calibration has {count} row(s) for op_kind '{op_kind}', need at least 2")]
    TooFewRows { op_kind: String, count: usize },
    #[error("device config: {0}")]
    DeviceConfig(String),
}

fn default_mac_budget() -> u64 {
    4800
}
fn default_memory_budget() -> u64 {
    2 * 1024 * 1024
}
fn default_clock_hz() -> f64 {
    100e6
}
fn default_energy_per_mac() -> f64 {
    5e-12
}
fn default_static_power() -> f64 {
    0.5
}
fn default_pipeline_depth() -> u64 {
    50
}

/// Resource and rate model of the direct-mapped FPGA pipeline.
///
/// The default `mac_budget` of 4800 is anchored to the largest mappable
/// layer being 64 filters of size 5x5 over 3 channels (5*5*3*64 = 4800).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpgaModel {
    /// Maximum concurrently mapped multipliers.
    #[serde(default = "default_mac_budget")]
    pub mac_budget: u64,
    /// On-chip bytes available for weights plus line buffers.
    #[serde(default = "default_memory_budget")]
    pub memory_budget_bytes: u64,
    #[serde(default = "default_clock_hz")]
    pub clock_hz: f64,
    #[serde(default = "default_energy_per_mac")]
    pub energy_per_mac_j: f64,
    #[serde(default = "default_static_power")]
    pub static_power_w: f64,
    /// Pipeline fill cycles added per mapped layer.
    #[serde(default = "default_pipeline_depth")]
    pub pipeline_depth_per_layer: u64,
}

impl Default for FpgaModel {
    fn default() -> Self {
        Self {
            mac_budget: default_mac_budget(),
            memory_budget_bytes: default_memory_budget(),
            clock_hz: default_clock_hz(),
            energy_per_mac_j: default_energy_per_mac(),
            static_power_w: default_static_power(),
            pipeline_depth_per_layer: default_pipeline_depth(),
        }
    }
}

fn default_bandwidth() -> f64 {
    2.5e9
}
fn default_fixed_latency() -> f64 {
    2e-6
}
fn default_energy_per_byte() -> f64 {
    1e-9
}

/// Interconnect between the two devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    #[serde(default = "default_bandwidth")]
    pub bandwidth_bytes_per_s: f64,
    /// Per-transfer setup latency.
    #[serde(default = "default_fixed_latency")]
    pub fixed_latency_s: f64,
    #[serde(default = "default_energy_per_byte")]
    pub energy_per_byte_j: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            bandwidth_bytes_per_s: default_bandwidth(),
            fixed_latency_s: default_fixed_latency(),
            energy_per_byte_j: default_energy_per_byte(),
        }
    }
}

/// Latency/energy of one device-side or link-side action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceCost {
    pub latency_s: f64,
    pub energy_j: f64,
}

impl DeviceCost {
    pub const ZERO: DeviceCost = DeviceCost {
        latency_s: 0.0,
        energy_j: 0.0,
    };
}

/// Physical resources a layer occupies when mapped whole.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FpgaResources {
    /// Physical multipliers: one per kernel tap across all filters.
    pub macs: u64,
    pub weight_bytes: u64,
    /// Line-buffer bytes: (k_h - 1) input rows must be held on chip.
    pub buffer_bytes: u64,
}

impl FpgaResources {
    pub fn memory_bytes(&self) -> u64 {
        self.weight_bytes + self.buffer_bytes
    }

    pub fn accumulate(&mut self, other: FpgaResources) {
        self.macs += other.macs;
        self.weight_bytes += other.weight_bytes;
        self.buffer_bytes += other.buffer_bytes;
    }

    pub fn fits(&self, model: &FpgaModel) -> bool {
        self.macs <= model.mac_budget && self.memory_bytes() <= model.memory_budget_bytes
    }
}

/// Resources to map one layer whole: `k_h * k_w * (C_I / groups) * N`
/// multipliers, its weight bytes, and `(k_h - 1) * W_I * C_I` line-buffer
/// bytes. Non-parametric layers occupy nothing.
pub fn fpga_resources(spec: &LayerSpec, in_shape: TensorShape) -> FpgaResources {
    match *spec {
        LayerSpec::Conv {
            k_h, k_w, n, groups, ..
        } => {
            if groups == 0 || !in_shape.c.is_multiple_of(groups) {
                return FpgaResources::default();
            }
            FpgaResources {
                macs: (k_h * k_w * (in_shape.c / groups) * n) as u64,
                weight_bytes: weight_bytes(spec, in_shape),
                buffer_bytes: ((k_h - 1) * in_shape.w * in_shape.c) as u64,
            }
        }
        LayerSpec::DepthwiseConv { k, .. } => FpgaResources {
            macs: (k * k * in_shape.c) as u64,
            weight_bytes: weight_bytes(spec, in_shape),
            buffer_bytes: ((k - 1) * in_shape.w * in_shape.c) as u64,
        },
        LayerSpec::Pointwise { n } => FpgaResources {
            macs: (in_shape.c * n) as u64,
            weight_bytes: weight_bytes(spec, in_shape),
            buffer_bytes: 0,
        },
        _ => FpgaResources::default(),
    }
}

/// Latency/energy of a pipelined FPGA segment: `layer_count` chained layers
/// fed `input_shape`, performing `total_macs` MACs. Latency is fill plus
/// stream: `(H_I * W_I + layer_count * depth) / clock`.
pub fn fpga_segment_cost(
    input_shape: TensorShape,
    layer_count: u64,
    total_macs: u64,
    model: &FpgaModel,
) -> DeviceCost {
    let pixels = (input_shape.h * input_shape.w) as f64;
    let latency_s = (pixels + (layer_count * model.pipeline_depth_per_layer) as f64) / model.clock_hz;
    let energy_j = model.static_power_w * latency_s + model.energy_per_mac_j * total_macs as f64;
    DeviceCost { latency_s, energy_j }
}

/// Cost of one layer mapped whole on the FPGA. Fails when the layer alone
/// exceeds the multiplier budget, signalling the planner not to place it.
pub fn fpga_cost(
    spec: &LayerSpec,
    in_shape: TensorShape,
    model: &FpgaModel,
) -> Result<DeviceCost, CostError> {
    let res = fpga_resources(spec, in_shape);
    if res.macs > model.mac_budget {
        return Err(CostError::Infeasible {
            needed: res.macs,
            budget: model.mac_budget,
        });
    }
    Ok(fpga_segment_cost(in_shape, 1, mac_count(spec, in_shape), model))
}

/// One measured calibration point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalRow {
    pub op_kind: String,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub k: usize,
    pub n: usize,
    /// Total MACs of the measured configuration (stride-1, same padding).
    pub macs: u64,
    pub latency_s: f64,
    pub power_w: f64,
}

/// GPU latency/power measurements, sorted by (op_kind, MACs) and
/// interpolated piecewise-linearly in total MACs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuCalibrationTable {
    rows: Vec<CalRow>,
}

const CALIBRATION_OP_KINDS: [&str; 3] = ["conv", "dwconv", "pointwise"];

fn row_macs(op_kind: &str, h: usize, w: usize, c_in: usize, k: usize, n: usize) -> Option<u64> {
    match op_kind {
        "conv" => Some((h * w * k * k * c_in * n) as u64),
        "dwconv" => Some((h * w * k * k * c_in) as u64),
        "pointwise" => Some((h * w * c_in * n) as u64),
        _ => None,
    }
}

impl GpuCalibrationTable {
    /// Build from rows, validating and sorting by (op_kind, MACs).
    pub fn new(mut rows: Vec<CalRow>) -> Result<Self, CostError> {
        for row in &rows {
            if row.latency_s <= 0.0 || row.power_w <= 0.0 {
                return Err(CostError::Calibration(format!(
                    "nonpositive latency or power in {} row",
                    row.op_kind
                )));
            }
        }
        rows.sort_by(|a, b| {
            a.op_kind
                .cmp(&b.op_kind)
                .then(a.macs.cmp(&b.macs))
                .then(a.latency_s.total_cmp(&b.latency_s))
        });
        let table = Self { rows };
        for kind in CALIBRATION_OP_KINDS {
            let count = table.rows_for(kind).len();
            if count == 1 {
                return Err(CostError::TooFewRows {
                    op_kind: kind.to_string(),
                    count,
                });
            }
        }
        Ok(table)
    }

    pub fn rows(&self) -> &[CalRow] {
        &self.rows
    }

    pub fn rows_for(&self, op_kind: &str) -> &[CalRow] {
        let start = self.rows.partition_point(|r| r.op_kind.as_str() < op_kind);
        let end = self.rows.partition_point(|r| r.op_kind.as_str() <= op_kind);
        &self.rows[start..end]
    }

    /// Interpolated (latency, power) at `macs`. Queries below the table
    /// clamp to the smallest row; queries beyond extrapolate linearly from
    /// the last two rows, floored at the smallest row's values.
    pub fn interpolate(&self, op_kind: &str, macs: u64) -> Result<(f64, f64), CostError> {
        let rows = self.rows_for(op_kind);
        if rows.is_empty() {
            return Err(CostError::OpKindMissing(op_kind.to_string()));
        }
        let first = &rows[0];
        let x = macs as f64;
        if rows.len() == 1 || macs <= first.macs {
            return Ok((first.latency_s, first.power_w));
        }
        let last = &rows[rows.len() - 1];
        if macs >= last.macs {
            let prev = &rows[rows.len() - 2];
            let dx = (last.macs - prev.macs) as f64;
            if dx == 0.0 {
                return Ok((last.latency_s, last.power_w));
            }
            let lat = last.latency_s + (last.latency_s - prev.latency_s) / dx * (x - last.macs as f64);
            let pow = last.power_w + (last.power_w - prev.power_w) / dx * (x - last.macs as f64);
            return Ok((lat.max(first.latency_s), pow.max(first.power_w)));
        }
        let hi = rows.partition_point(|r| r.macs <= macs);
        let (lo_row, hi_row) = (&rows[hi - 1], &rows[hi]);
        let t = (x - lo_row.macs as f64) / (hi_row.macs - lo_row.macs) as f64;
        Ok((
            lo_row.latency_s + t * (hi_row.latency_s - lo_row.latency_s),
            lo_row.power_w + t * (hi_row.power_w - lo_row.power_w),
        ))
    }
}

/// GPU cost of one layer: interpolated latency, energy = power * latency.
/// Non-parametric layers (pool, concat, add, split, shuffle) are costed at
/// zero; they perform no MACs and the calibration domain is MAC count.
pub fn gpu_cost(
    spec: &LayerSpec,
    in_shape: TensorShape,
    table: &GpuCalibrationTable,
) -> Result<DeviceCost, CostError> {
    if !spec.is_parametric() {
        return Ok(DeviceCost::ZERO);
    }
    let macs = mac_count(spec, in_shape);
    let (latency_s, power_w) = table.interpolate(spec.kind_name(), macs)?;
    Ok(DeviceCost {
        latency_s,
        energy_j: power_w * latency_s,
    })
}

/// Link transfer cost: `fixed_latency + bytes / bandwidth` and
/// `energy_per_byte * bytes`.
pub fn link_cost(bytes: u64, model: &LinkModel) -> DeviceCost {
    DeviceCost {
        latency_s: model.fixed_latency_s + bytes as f64 / model.bandwidth_bytes_per_s,
        energy_j: model.energy_per_byte_j * bytes as f64,
    }
}

#[derive(Debug, Deserialize)]
struct RawCalRow {
    op_kind: String,
    h: usize,
    w: usize,
    c_in: usize,
    k: usize,
    n: usize,
    latency_us: f64,
    power_mw: f64,
}

/// Parse a calibration CSV. Columns: `op_kind,h,w,c_in,k,n,latency_us,power_mw`
/// (microseconds and milliwatts). `#` lines are comments. Rows may appear in
/// any order; the table is sorted on load.
pub fn load_calibration(text: &str) -> Result<GpuCalibrationTable, CostError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, record) in reader.deserialize::<RawCalRow>().enumerate() {
        let row_no = i + 2; // 1-based, after the header
        let raw = record.map_err(|e| CostError::CalibrationRow {
            row: row_no,
            msg: e.to_string(),
        })?;
        if raw.latency_us <= 0.0 {
            return Err(CostError::CalibrationRow {
                row: row_no,
                msg: format!("latency_us must be positive, got {}", raw.latency_us),
            });
        }
        if raw.power_mw <= 0.0 {
            return Err(CostError::CalibrationRow {
                row: row_no,
                msg: format!("power_mw must be positive, got {}", raw.power_mw),
            });
        }
        if raw.h == 0 || raw.w == 0 || raw.c_in == 0 || raw.k == 0 || raw.n == 0 {
            return Err(CostError::CalibrationRow {
                row: row_no,
                msg: "dimensions must be positive".to_string(),
            });
        }
        let macs = row_macs(&raw.op_kind, raw.h, raw.w, raw.c_in, raw.k, raw.n).ok_or(
            CostError::CalibrationRow {
                row: row_no,
                msg: format!("unknown op_kind '{}'", raw.op_kind),
            },
        )?;
        rows.push(CalRow {
            op_kind: raw.op_kind,
            h: raw.h,
            w: raw.w,
            c_in: raw.c_in,
            k: raw.k,
            n: raw.n,
            macs,
            latency_s: raw.latency_us * 1e-6,
            power_w: raw.power_mw * 1e-3,
        });
    }
    if rows.is_empty() {
        return Err(CostError::Calibration("no data rows".to_string()));
    }
    GpuCalibrationTable::new(rows)
}

/// FPGA and link parameters as read from a device config file (TOML with
/// `[fpga]` and `[link]` tables; missing keys take the defaults).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    #[serde(default)]
    pub fpga: FpgaModel,
    #[serde(default)]
    pub link: LinkModel,
}

pub fn load_device_config(text: &str) -> Result<DeviceConfig, CostError> {
    let config: DeviceConfig =
        toml::from_str(text).map_err(|e| CostError::DeviceConfig(e.to_string()))?;
    let f = &config.fpga;
    for (name, v) in [
        ("fpga.clock_hz", f.clock_hz),
        ("fpga.energy_per_mac_j", f.energy_per_mac_j),
        ("fpga.static_power_w", f.static_power_w),
        ("link.bandwidth_bytes_per_s", config.link.bandwidth_bytes_per_s),
    ] {
        if v <= 0.0 {
            return Err(CostError::DeviceConfig(format!("{name} must be positive, got {v}")));
        }
    }
    if f.mac_budget == 0 {
        return Err(CostError::DeviceConfig("fpga.mac_budget must be positive".into()));
    }
    if config.link.fixed_latency_s < 0.0 {
        return Err(CostError::DeviceConfig(
            "link.fixed_latency_s must be nonnegative".into(),
        ));
    }
    Ok(config)
}

/// The full model bundle consumed by the planner and simulator.
#[derive(Debug, Clone)]
pub struct DeviceModels {
    pub fpga: FpgaModel,
    pub gpu: GpuCalibrationTable,
    pub link: LinkModel,
}
