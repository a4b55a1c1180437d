#![allow(dead_code)]

use std::path::PathBuf;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use voxflow::hw_blocks::{legal_streams_in, legal_streams_out, max_p_mac, streams_tied};
use voxflow::model_ir::{ActivationType, EwMode, EwType, ModelBuilder, ModelDag, TensorShape};
use voxflow::{make_block, parse_model, BlockConfig, DeviceSpec, Parallelism};

pub fn asset(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets").join(rel)
}

pub fn model(name: &str) -> ModelDag {
    let text = std::fs::read_to_string(asset(&format!("models/{name}.json"))).unwrap();
    parse_model(&text).unwrap()
}

pub fn device(name: &str) -> DeviceSpec {
    let text = std::fs::read_to_string(asset(&format!("devices/{name}.json"))).unwrap();
    DeviceSpec::from_json(&text).unwrap()
}

pub fn device_with(dsp: u64, bram: u64, gbps: f64) -> DeviceSpec {
    DeviceSpec::from_json(&format!(
        r#"{{"name":"test","dsp":{dsp},"bram18":{bram},"lut":10000000,"ff":10000000,
            "bandwidth_gbps":{gbps},"clock_mhz":100,"reconfig_time_ms":1}}"#
    ))
    .unwrap()
}

/// Every legal `(s_i, s_o, p_mac)` of a layer.
pub fn parallelism_options(layer: &voxflow::LayerDescriptor) -> Vec<Parallelism> {
    let mut out = Vec::new();
    for &s_i in &legal_streams_in(layer) {
        let outs = if streams_tied(layer) { vec![s_i] } else { legal_streams_out(layer) };
        for s_o in outs {
            for p_mac in 1..=max_p_mac(layer) {
                out.push(Parallelism::new(s_i, s_o, p_mac));
            }
        }
    }
    out
}

fn small_channels(rng: &mut ChaCha8Rng) -> usize {
    *[1, 2, 3, 4].choose(rng).unwrap()
}

fn shape_preserving(b: &mut ModelBuilder, id: &str, x: &str, rng: &mut ChaCha8Rng) -> String {
    let c = b.shape(x).channels;
    match rng.random_range(0..4) {
        0 => b.activation(id, x, ActivationType::Relu),
        1 => b.activation(id, x, ActivationType::Sigmoid),
        2 => b.conv(id, x, c, [3, 3, 3], [1, 1, 1], [1, 1, 1], 1),
        _ => b.conv(id, x, c, [1, 1, 1], [1, 1, 1], [0, 0, 0], if rng.random_bool(0.5) { c } else { 1 }),
    }
}

/// A small model with forks and joins: chains, residual blocks, gated
/// branches and nested residuals.
pub fn random_branchy_model(rng: &mut ChaCha8Rng, index: usize) -> ModelDag {
    let mut b = ModelBuilder::new(format!("rand{index}"));
    let shape = TensorShape::new(small_channels(rng), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=3));
    let mut x = b.input_activation("in", shape, ActivationType::Relu);
    let steps = rng.random_range(1..=4);
    let mut n = 0;
    let mut id = |p: &str| {
        n += 1;
        format!("{p}{n}")
    };
    for _ in 0..steps {
        match rng.random_range(0..5) {
            0 => {
                let f = small_channels(rng);
                x = b.conv(&id("conv"), &x, f, [1, 1, 1], [1, 1, 1], [0, 0, 0], 1);
            }
            1 => {
                let mut y = x.clone();
                for _ in 0..rng.random_range(1..=2) {
                    y = shape_preserving(&mut b, &id("br"), &y, rng);
                }
                x = b.elementwise(&id("add"), &y, &x, EwType::Add, EwMode::Normal);
            }
            2 => {
                let g = b.global_avg_pool(&id("gap"), &x);
                let g = b.activation(&id("gate"), &g, ActivationType::Sigmoid);
                x = b.elementwise(&id("mul"), &x, &g, EwType::Mul, EwMode::Broadcast);
            }
            3 => {
                let inner = shape_preserving(&mut b, &id("br"), &x, rng);
                let inner2 = shape_preserving(&mut b, &id("br"), &inner, rng);
                let j = b.elementwise(&id("add"), &inner2, &inner, EwType::Add, EwMode::Normal);
                x = b.elementwise(&id("add"), &j, &x, EwType::Add, EwMode::Normal);
            }
            _ => x = shape_preserving(&mut b, &id("op"), &x, rng),
        }
    }
    b.build().unwrap()
}

pub fn random_blocks(dag: &ModelDag, rng: &mut ChaCha8Rng) -> Vec<BlockConfig> {
    dag.layers_in_order()
        .map(|l| {
            let p = *parallelism_options(l).choose(rng).unwrap();
            make_block(l, p.s_i, p.s_o, p.p_mac).unwrap()
        })
        .collect()
}
