//! Benchmark-only crate; see `benches/pipeline.rs`. Shared setup helpers
//! live here so benches stay short.

use hetplan_core::cost::load_calibration;
use hetplan_core::{DeviceModels, FpgaModel, LinkModel};

/// The shipped fpga-favorable calibration plus default device parameters.
pub fn default_models() -> DeviceModels {
    let calibration = include_str!("../../../fixtures/calibration/fpga_favorable.csv");
    DeviceModels {
        fpga: FpgaModel::default(),
        gpu: load_calibration(calibration).expect("fixture calibration parses"),
        link: LinkModel::default(),
    }
}
