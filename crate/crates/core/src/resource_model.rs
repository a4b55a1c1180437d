//! Device budgets and the DSP/BRAM/LUT/FF cost model.
//!
//! The per-block cost formulas are estimates, not vendor numbers. They are
//! monotone in every parallelism knob and additive over blocks, which is what
//! the design space exploration relies on. All coefficients live in
//! [`CostCoefficients`] and can be loaded from JSON.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hw_blocks::BlockConfig;
use crate::model_ir::{ActivationType, EwType, LayerOp};
use crate::sdfg::{SdfGraph, SdfNodeKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    pub dsp_total: u64,
    pub bram18_total: u64,
    pub lut_total: u64,
    pub ff_total: u64,
    /// Off-chip memory bandwidth in bytes per second.
    pub bandwidth: f64,
    pub clock_hz: f64,
    /// Seconds to load one partition's bitstream.
    pub t_reconfig: f64,
    pub word_bits: u32,
    /// Share of the bandwidth given to input nodes; `None` splits it equally
    /// among all memory nodes of a partition.
    pub bandwidth_in_fraction: Option<f64>,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct DeviceFile {
    name: String,
    dsp: u64,
    bram18: u64,
    lut: u64,
    ff: u64,
    bandwidth_gbps: f64,
    clock_mhz: f64,
    reconfig_time_ms: f64,
    #[serde(default = "default_word_bits")]
    word_bits: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bandwidth_in_fraction: Option<f64>,
}

fn default_word_bits() -> u32 {
    16
}

impl DeviceSpec {
    /// Parses the device JSON. `bandwidth_gbps` is in gigabits per second.
    pub fn from_json(text: &str) -> Result<Self> {
        let f: DeviceFile = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        let device = DeviceSpec {
            name: f.name,
            dsp_total: f.dsp,
            bram18_total: f.bram18,
            lut_total: f.lut,
            ff_total: f.ff,
            bandwidth: f.bandwidth_gbps * 1e9 / 8.0,
            clock_hz: f.clock_mhz * 1e6,
            t_reconfig: f.reconfig_time_ms * 1e-3,
            word_bits: f.word_bits,
            bandwidth_in_fraction: f.bandwidth_in_fraction,
        };
        device.validate()?;
        Ok(device)
    }

    pub fn to_json(&self) -> String {
        let f = DeviceFile {
            name: self.name.clone(),
            dsp: self.dsp_total,
            bram18: self.bram18_total,
            lut: self.lut_total,
            ff: self.ff_total,
            bandwidth_gbps: self.bandwidth * 8.0 / 1e9,
            clock_mhz: self.clock_hz / 1e6,
            reconfig_time_ms: self.t_reconfig * 1e3,
            word_bits: self.word_bits,
            bandwidth_in_fraction: self.bandwidth_in_fraction,
        };
        serde_json::to_string_pretty(&f).expect("device serialisation cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        let totals = [self.dsp_total, self.bram18_total, self.lut_total, self.ff_total];
        if totals.contains(&0) {
            return Err(Error::Config(format!("device `{}` has a zero resource total", self.name)));
        }
        if !(self.bandwidth > 0.0 && self.clock_hz > 0.0 && self.t_reconfig >= 0.0 && self.word_bits > 0) {
            return Err(Error::Config(format!("device `{}` has a non-positive rate", self.name)));
        }
        if let Some(frac) = self.bandwidth_in_fraction {
            if !(0.0..=1.0).contains(&frac) || frac == 0.0 || frac == 1.0 {
                return Err(Error::Config("bandwidth_in_fraction must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }

    /// Memory bandwidth expressed in words per clock cycle.
    pub fn words_per_cycle(&self) -> f64 {
        self.bandwidth * 8.0 / (self.word_bits as f64 * self.clock_hz)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceUsage {
    pub dsp: u64,
    pub bram18: u64,
    pub lut: u64,
    pub ff: u64,
}

impl Add for ResourceUsage {
    type Output = ResourceUsage;
    fn add(self, o: ResourceUsage) -> ResourceUsage {
        ResourceUsage {
            dsp: self.dsp + o.dsp,
            bram18: self.bram18 + o.bram18,
            lut: self.lut + o.lut,
            ff: self.ff + o.ff,
        }
    }
}

impl AddAssign for ResourceUsage {
    fn add_assign(&mut self, o: ResourceUsage) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ResourceUsage {
    fn sum<I: Iterator<Item = ResourceUsage>>(iter: I) -> Self {
        iter.fold(ResourceUsage::default(), Add::add)
    }
}

/// Fraction of each device budget in use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Utilization {
    pub dsp: f64,
    pub bram18: f64,
    pub lut: f64,
    pub ff: f64,
}

impl ResourceUsage {
    pub fn utilization(&self, device: &DeviceSpec) -> Utilization {
        Utilization {
            dsp: self.dsp as f64 / device.dsp_total as f64,
            bram18: self.bram18 as f64 / device.bram18_total as f64,
            lut: self.lut as f64 / device.lut_total as f64,
            ff: self.ff as f64 / device.ff_total as f64,
        }
    }
}

/// Which categories participate in the feasibility check. DSP and BRAM are
/// always constrained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constraints {
    #[serde(default)]
    pub lut: bool,
    #[serde(default)]
    pub ff: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostCoefficients {
    pub words_per_bram18: u64,
    pub lut_per_stream: u64,
    pub lut_per_dsp: u64,
    pub ff_per_stream: u64,
    pub ff_per_dsp: u64,
    pub constraints: Constraints,
}

impl Default for CostCoefficients {
    fn default() -> Self {
        CostCoefficients {
            words_per_bram18: 1024,
            lut_per_stream: 48,
            lut_per_dsp: 32,
            ff_per_stream: 64,
            ff_per_dsp: 48,
            constraints: Constraints::default(),
        }
    }
}

/// Replaceable cost model interface.
pub trait ResourceEstimator: Send + Sync {
    fn block(&self, block: &BlockConfig) -> ResourceUsage;
    fn fifo(&self, depth: u64, streams: usize) -> ResourceUsage;
    fn constraints(&self) -> Constraints;
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinearCostModel {
    pub coeffs: CostCoefficients,
}

impl LinearCostModel {
    pub fn new(coeffs: CostCoefficients) -> Self {
        LinearCostModel { coeffs }
    }

    fn brams(&self, words: u64) -> u64 {
        words.div_ceil(self.coeffs.words_per_bram18)
    }
}

impl ResourceEstimator for LinearCostModel {
    fn block(&self, block: &BlockConfig) -> ResourceUsage {
        let layer = &block.layer;
        let input = layer.primary_input();
        let (s_i, s_o, p_mac) = (block.s_i as u64, block.s_o as u64, block.p_mac as u64);
        let (dsp, words) = match &layer.op {
            LayerOp::Conv3d { window, groups } => {
                let dsp = if layer.is_depthwise() { s_i * p_mac } else { s_i * s_o * p_mac };
                let [kh, kw, kd] = window.kernel.map(|k| k as u64);
                let (h, w, c_in) = (input.height as u64, input.width as u64, input.channels as u64);
                let window_words = ((kd - 1) * h * w + (kh - 1) * w + kw) * c_in;
                let weights = c_in * layer.output_shape.channels as u64 * kh * kw * kd / *groups as u64;
                (dsp, window_words + weights)
            }
            LayerOp::Pool3d { window } => {
                let [kh, kw, kd] = window.kernel.map(|k| k as u64);
                let (h, w, c) = (input.height as u64, input.width as u64, input.channels as u64);
                (0, ((kd - 1) * h * w + (kh - 1) * w + kw) * c)
            }
            LayerOp::Activation(ActivationType::Relu) => (0, 0),
            LayerOp::Activation(_) => (s_i, 0),
            LayerOp::ElementWise { op: EwType::Mul, .. } => (s_o, 0),
            LayerOp::ElementWise { op: EwType::Add, .. } => (0, 0),
            LayerOp::GlobalAvgPool => (0, input.channels as u64),
        };
        let streams = s_i + s_o;
        let c = &self.coeffs;
        ResourceUsage {
            dsp,
            bram18: self.brams(words),
            lut: c.lut_per_stream * streams + c.lut_per_dsp * dsp,
            ff: c.ff_per_stream * streams + c.ff_per_dsp * dsp,
        }
    }

    fn fifo(&self, depth: u64, streams: usize) -> ResourceUsage {
        ResourceUsage { bram18: self.brams(depth * streams as u64), ..Default::default() }
    }

    fn constraints(&self) -> Constraints {
        self.coeffs.constraints
    }
}

/// Resources of one block under the default coefficients.
pub fn block_resources(block: &BlockConfig) -> ResourceUsage {
    LinearCostModel::default().block(block)
}

/// Sum of block costs plus merge-buffer FIFOs.
pub fn partition_resources_with(graph: &SdfGraph, model: &dyn ResourceEstimator) -> ResourceUsage {
    let blocks: ResourceUsage = graph
        .nodes
        .iter()
        .filter_map(|n| match &n.kind {
            SdfNodeKind::Block(b) => Some(model.block(b)),
            _ => None,
        })
        .sum();
    let fifos: ResourceUsage = graph
        .merge_buffers
        .iter()
        .map(|(&arc, &depth)| model.fifo(depth, graph.arcs[arc].consumer_streams))
        .sum();
    blocks + fifos
}

pub fn partition_resources(graph: &SdfGraph) -> ResourceUsage {
    partition_resources_with(graph, &LinearCostModel::default())
}

/// `usage <= budget` in every constrained category (boundary inclusive).
pub fn feasible_with(usage: &ResourceUsage, device: &DeviceSpec, constraints: Constraints) -> bool {
    usage.dsp <= device.dsp_total
        && usage.bram18 <= device.bram18_total
        && (!constraints.lut || usage.lut <= device.lut_total)
        && (!constraints.ff || usage.ff <= device.ff_total)
}

pub fn feasible(usage: &ResourceUsage, device: &DeviceSpec) -> bool {
    feasible_with(usage, device, Constraints::default())
}

/// Summed relative overshoot over constrained categories; 0 when feasible.
pub fn violation(usage: &ResourceUsage, device: &DeviceSpec, constraints: Constraints) -> f64 {
    let over = |used: u64, total: u64| (used as f64 / total as f64 - 1.0).max(0.0);
    let mut v = over(usage.dsp, device.dsp_total) + over(usage.bram18, device.bram18_total);
    if constraints.lut {
        v += over(usage.lut, device.lut_total);
    }
    if constraints.ff {
        v += over(usage.ff, device.ff_total);
    }
    v
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::hw_blocks::make_block;
    use crate::model_ir::{ModelBuilder, TensorShape};

    pub(crate) fn zcu102() -> DeviceSpec {
        DeviceSpec::from_json(
            r#"{"name":"zcu102","dsp":2520,"bram18":1824,"lut":274080,"ff":548160,
                "bandwidth_gbps":153.6,"clock_mhz":160,"reconfig_time_ms":80,"word_bits":16}"#,
        )
        .unwrap()
    }

    #[test]
    fn relu_uses_no_dsp() {
        let mut b = ModelBuilder::new("r");
        b.input_activation("r", TensorShape::new(8, 4, 4, 4), ActivationType::Relu);
        let dag = b.build().unwrap();
        for s in [1, 2, 4, 8] {
            assert_eq!(block_resources(&make_block(dag.layer("r").unwrap(), s, s, 1).unwrap()).dsp, 0);
        }
    }

    #[test]
    fn pointwise_conv_dsp_is_stream_product() {
        let mut b = ModelBuilder::new("c");
        b.input_conv("c", TensorShape::new(4, 4, 4, 4), 8, [1, 1, 1], [1, 1, 1], [0, 0, 0], 1);
        let dag = b.build().unwrap();
        let block = make_block(dag.layer("c").unwrap(), 4, 8, 1).unwrap();
        assert_eq!(block_resources(&block).dsp, 32);
    }

    #[test]
    fn fifo_brams_round_up() {
        let m = LinearCostModel::default();
        assert_eq!(m.fifo(2048, 1).bram18, 2);
        assert_eq!(m.fifo(2049, 1).bram18, 3);
        assert_eq!(m.fifo(0, 4).bram18, 0);
    }

    #[test]
    fn feasibility_is_boundary_inclusive() {
        let dev = zcu102();
        assert!(feasible(&ResourceUsage::default(), &dev));
        let exact = ResourceUsage { dsp: dev.dsp_total, bram18: dev.bram18_total, lut: dev.lut_total, ff: dev.ff_total };
        assert!(feasible(&exact, &dev));
        assert!(!feasible(&ResourceUsage { dsp: dev.dsp_total + 1, ..Default::default() }, &dev));
        let lut_heavy = ResourceUsage { lut: dev.lut_total + 1, ..Default::default() };
        assert!(feasible(&lut_heavy, &dev));
        assert!(!feasible_with(&lut_heavy, &dev, Constraints { lut: true, ff: false }));
    }

    #[test]
    fn device_json_round_trips() {
        let dev = zcu102();
        assert!((dev.words_per_cycle() - 60.0).abs() < 1e-9);
        let again = DeviceSpec::from_json(&dev.to_json()).unwrap();
        assert_eq!(dev.dsp_total, again.dsp_total);
        assert!((dev.bandwidth - again.bandwidth).abs() < 1e-3);
        assert!(DeviceSpec::from_json(r#"{"name":"x","dsp":0,"bram18":1,"lut":1,"ff":1,
            "bandwidth_gbps":1,"clock_mhz":1,"reconfig_time_ms":1}"#).is_err());
    }
}
