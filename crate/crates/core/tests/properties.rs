//! Property tests for the library-wide invariants: quantization behavior,
//! split-sum exactness, cost-model monotonicity, scheduling identities and
//! end-to-end determinism.

use hetplan_core::cost::{
    fpga_cost, link_cost, CalRow, FpgaModel, GpuCalibrationTable, LinkModel,
};
use hetplan_core::exec::{execute_graph, execute_plan, save_tensor};
use hetplan_core::fxp::{channel_split_conv, combine_partials, conv2d, quantize, ConvKernel, FxpTensor};
use hetplan_core::graph::{LayerSpec, Padding, TensorShape};
use hetplan_core::plan::Objective;
use hetplan_core::sim::{stage_latency, StageMode};
use hetplan_core::synth::{random_graph, random_plan, random_tensor, random_weights, GraphGen};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn quantize_saturates_and_is_monotone(
        a in -10.0f64..10.0,
        b in -10.0f64..10.0,
        f in 0u8..=7,
    ) {
        let shape = TensorShape::new(1, 1, 2);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let t = quantize(&[lo, hi], shape, f).unwrap();
        let v = t.values();
        prop_assert!((-128..=127).contains(&i32::from(v[0])));
        prop_assert!((-128..=127).contains(&i32::from(v[1])));
        prop_assert!(v[0] <= v[1], "quantize must be monotone: {lo} -> {}, {hi} -> {}", v[0], v[1]);
    }

    #[test]
    fn split_sum_matches_unsplit_conv(
        seed in 0u64..500,
        c in 2usize..=6,
        k_idx in 0usize..3,
        stride in 1usize..=2,
        valid in proptest::bool::ANY,
    ) {
        let k = [1usize, 3, 5][k_idx];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 6;
        let padding = if valid && k <= h { Padding::Valid } else { Padding::Same };
        let shape = TensorShape::new(h, h, c);
        let ifm = random_tensor(&mut rng, shape, 6);
        let n = 2;
        let weights: Vec<i8> = (0..k * k * c * n).map(|i| ((seed as usize + i * 37) % 255) as i8).collect();
        let kernel = ConvKernel::new(k, k, c, n, 6, weights).unwrap();
        let spec = LayerSpec::Conv { k_h: k, k_w: k, n, stride, padding, groups: 1 };
        let whole = conv2d(&ifm, &kernel, &spec).unwrap();
        for g in 1..c {
            let (a, b) = channel_split_conv(&ifm, &kernel, &spec, g).unwrap();
            prop_assert_eq!(&combine_partials(&a, &b).unwrap(), &whole, "g={}", g);
        }
    }

    #[test]
    fn latency_hiding_is_exact(
        gpu_us in 0.0f64..10_000.0,
        fpga_us in 0.0f64..10_000.0,
        comm_us in 0.0f64..10_000.0,
    ) {
        let lat = stage_latency(StageMode::ParallelSplit, gpu_us, fpga_us, comm_us);
        if fpga_us + comm_us <= gpu_us {
            prop_assert_eq!(lat, gpu_us);
        } else {
            prop_assert_eq!(lat, fpga_us + comm_us);
        }
    }

    #[test]
    fn link_cost_is_affine_in_bytes(bytes in 0u64..10_000_000, extra in 1u64..1_000_000) {
        let model = LinkModel { bandwidth_bytes_per_s: 2.5e9, fixed_latency_s: 3e-6, energy_per_byte_j: 2e-10 };
        let a = link_cost(bytes, &model);
        let b = link_cost(bytes + extra, &model);
        let slope = (b.latency_s - a.latency_s) / extra as f64;
        prop_assert!((slope - 1.0 / 2.5e9).abs() < 1e-15);
        prop_assert!((b.energy_j - a.energy_j - 2e-10 * extra as f64).abs() < 1e-12);
    }
}

#[test]
fn fpga_latency_ignores_filters_energy_tracks_macs() {
    let model = FpgaModel::default();
    let shape = TensorShape::new(16, 16, 3);
    let mut last_energy = 0.0;
    let mut latencies = Vec::new();
    for n in [1usize, 4, 16, 64] {
        let spec = LayerSpec::Conv {
            k_h: 3,
            k_w: 3,
            n,
            stride: 1,
            padding: Padding::Same,
            groups: 1,
        };
        let cost = fpga_cost(&spec, shape, &model).unwrap();
        latencies.push(cost.latency_s);
        assert!(cost.energy_j > last_energy, "energy must grow with MACs");
        last_energy = cost.energy_j;
    }
    assert!(latencies.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn gpu_interpolation_monotone_for_monotone_tables() {
    let rows: Vec<CalRow> = (1..=5)
        .map(|i| CalRow {
            op_kind: "conv".to_string(),
            h: 8,
            w: 8,
            c_in: 1,
            k: 1,
            n: i * 100,
            macs: (8 * 8 * i * 100) as u64,
            latency_s: 1e-5 * i as f64,
            power_w: 1.0 + 0.1 * i as f64,
        })
        .collect();
    let table = GpuCalibrationTable::new(rows).unwrap();
    let mut last = 0.0;
    for macs in (0..200_000).step_by(777) {
        let (lat, _) = table.interpolate("conv", macs as u64).unwrap();
        assert!(lat >= last, "latency decreased at {macs}");
        last = lat;
    }
}

#[test]
fn execution_is_deterministic_across_runs() {
    let make = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = random_graph(&mut rng, &GraphGen::default());
        let input = random_tensor(&mut rng, graph.input_shape, 6);
        let weights = random_weights(&mut rng, &graph, 6);
        let plan = random_plan(&mut rng, &graph, &FpgaModel::default(), Objective::Energy);
        let out = execute_plan(&graph, &plan, &input, &weights).unwrap();
        (plan.to_json(), save_tensor(&out))
    };
    for seed in [3u64, 17, 255] {
        assert_eq!(make(seed), make(seed));
    }
}

#[test]
fn random_plans_preserve_results_quick() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..40 {
        let graph = random_graph(&mut rng, &GraphGen::default());
        let input = random_tensor(&mut rng, graph.input_shape, 6);
        let weights = random_weights(&mut rng, &graph, 6);
        let plan = random_plan(&mut rng, &graph, &FpgaModel::default(), Objective::Energy);
        let a = execute_graph(&graph, &input, &weights).unwrap();
        let b = execute_plan(&graph, &plan, &input, &weights).unwrap();
        assert_eq!(a, b, "plan rewrite changed the result");
    }
}

#[test]
fn quantize_examples_pin_rounding() {
    let t = quantize(&[1.0, 3.0, -0.25, 0.5], TensorShape::new(1, 1, 4), 6).unwrap();
    assert_eq!(t.values(), &[64, 127, -16, 32]);
    // round half away from zero at the representable boundary
    let t = quantize(&[0.0234375, -0.0234375], TensorShape::new(1, 1, 2), 6).unwrap();
    assert_eq!(t.values(), &[2, -2]); // 1.5 rounds away to 2
}

#[test]
fn requantize_truncates_toward_negative_infinity() {
    // (-1 * 32) at f=6: accumulator -32 >> 6 = -1 (arithmetic shift), not 0
    let ifm = FxpTensor::new(TensorShape::new(1, 1, 1), 6, vec![-1]).unwrap();
    let w = ConvKernel::new(1, 1, 1, 1, 6, vec![32]).unwrap();
    let spec = LayerSpec::Pointwise { n: 1 };
    let out = conv2d(&ifm, &w, &spec).unwrap();
    assert_eq!(out.values(), &[-1]);
}
