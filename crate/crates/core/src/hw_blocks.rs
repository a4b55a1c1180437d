//! Hardware building blocks: tunable parallelism, stream rates and pipeline
//! depth for each layer kind.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_ir::{LayerDescriptor, LayerKind, LayerOp};
use crate::rate::Rate;

/// Tunable parameters of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Parallelism {
    pub s_i: usize,
    pub s_o: usize,
    #[serde(default = "one")]
    pub p_mac: usize,
}

fn one() -> usize {
    1
}

impl Parallelism {
    pub const MINIMAL: Parallelism = Parallelism { s_i: 1, s_o: 1, p_mac: 1 };

    pub fn new(s_i: usize, s_o: usize, p_mac: usize) -> Self {
        Parallelism { s_i, s_o, p_mac }
    }
}

/// Consumption rate per input arc and production rate, per stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RatePair {
    pub r_in: Vec<Rate>,
    pub r_out: Rate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub layer: LayerDescriptor,
    pub s_i: usize,
    pub s_o: usize,
    pub p_mac: usize,
    pub rates: RatePair,
    pub depth: u64,
}

impl BlockConfig {
    pub fn parallelism(&self) -> Parallelism {
        Parallelism::new(self.s_i, self.s_o, self.p_mac)
    }

    pub fn r_i(&self) -> Rate {
        self.rates.r_in[0]
    }

    pub fn r_o(&self) -> Rate {
        self.rates.r_out
    }

    /// Fine-grained unroll factor `p_mac / (K_h K_w K_d)`; 1 outside convolutions.
    pub fn fine_factor(&self) -> Rate {
        fine_factor(&self.layer, self.p_mac)
    }
}

fn fine_factor(layer: &LayerDescriptor, p_mac: usize) -> Rate {
    match &layer.op {
        LayerOp::Conv3d { window, .. } => Rate::new(p_mac as u64, window.kernel_volume() as u64),
        _ => Rate::ONE,
    }
}

/// Whether `s_o` is forced equal to `s_i` for this layer.
pub fn streams_tied(layer: &LayerDescriptor) -> bool {
    layer.kind() != LayerKind::Conv3d || layer.is_depthwise()
}

pub fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).collect()
}

/// Legal `s_i` values: divisors of the input channel count.
pub fn legal_streams_in(layer: &LayerDescriptor) -> Vec<usize> {
    divisors(layer.primary_input().channels)
}

/// Legal `s_o` values (only meaningful when the streams are not tied).
pub fn legal_streams_out(layer: &LayerDescriptor) -> Vec<usize> {
    divisors(layer.output_shape.channels)
}

pub fn max_p_mac(layer: &LayerDescriptor) -> usize {
    match &layer.op {
        LayerOp::Conv3d { window, .. } => window.kernel_volume(),
        _ => 1,
    }
}

/// Largest legal configuration of a layer.
pub fn max_parallelism(layer: &LayerDescriptor) -> Parallelism {
    let s_i = layer.primary_input().channels;
    let s_o = if streams_tied(layer) { s_i } else { layer.output_shape.channels };
    Parallelism::new(s_i, s_o, max_p_mac(layer))
}

pub fn check_parallelism(layer: &LayerDescriptor, p: Parallelism) -> Result<()> {
    let illegal = |detail: String| Error::IllegalParallelism { layer: layer.id.clone(), detail };
    let c_in = layer.primary_input().channels;
    let c_out = layer.output_shape.channels;
    if p.s_i == 0 || p.s_i > c_in || !c_in.is_multiple_of(p.s_i) {
        return Err(illegal(format!("s_i = {} must divide C_in = {c_in}", p.s_i)));
    }
    if streams_tied(layer) {
        if p.s_o != p.s_i {
            return Err(illegal(format!("s_o = {} must equal s_i = {} for {}", p.s_o, p.s_i, layer.kind())));
        }
    } else if p.s_o == 0 || p.s_o > c_out || !c_out.is_multiple_of(p.s_o) {
        return Err(illegal(format!("s_o = {} must divide C_out = {c_out}", p.s_o)));
    }
    let max_mac = max_p_mac(layer);
    if p.p_mac == 0 || p.p_mac > max_mac {
        return Err(illegal(format!("p_mac = {} outside [1, {max_mac}]", p.p_mac)));
    }
    Ok(())
}

pub fn make_block(layer: &LayerDescriptor, s_i: usize, s_o: usize, p_mac: usize) -> Result<BlockConfig> {
    check_parallelism(layer, Parallelism::new(s_i, s_o, p_mac))?;
    let mut block = BlockConfig {
        layer: layer.clone(),
        s_i,
        s_o,
        p_mac,
        rates: RatePair { r_in: vec![Rate::ONE; layer.input_shapes.len()], r_out: Rate::ONE },
        depth: 0,
    };
    block.rates = compute_rates(&block);
    block.depth = block_depth(&block);
    Ok(block)
}

pub fn compute_rates(block: &BlockConfig) -> RatePair {
    let layer = &block.layer;
    let arity = layer.input_shapes.len();
    match layer.kind() {
        LayerKind::Activation | LayerKind::ElementWise => RatePair { r_in: vec![Rate::ONE; arity], r_out: Rate::ONE },
        LayerKind::GlobalAvgPool => RatePair {
            r_in: vec![Rate::ONE],
            r_out: Rate::new(1, layer.primary_input().volume()),
        },
        LayerKind::Conv3d | LayerKind::Pool3d => {
            let f = block.fine_factor();
            let e_in = layer.primary_input().elements() / block.s_i as u64;
            let e_out = layer.output_shape.elements() / block.s_o as u64;
            let ratio = Rate::new(e_out, e_in);
            let r_o = f * ratio;
            if r_o > Rate::ONE {
                RatePair { r_in: vec![ratio.recip()], r_out: Rate::ONE }
            } else {
                RatePair { r_in: vec![f], r_out: r_o }
            }
        }
    }
}

fn ceil_log2(n: u64) -> u64 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros() as u64
    }
}

/// Pipeline-fill cycles of a block.
pub fn block_depth(block: &BlockConfig) -> u64 {
    let layer = &block.layer;
    let input = layer.primary_input();
    let per_stream = (input.channels / block.s_i) as u64;
    match &layer.op {
        LayerOp::Conv3d { window, .. } | LayerOp::Pool3d { window } => {
            let [kh, kw, kd] = window.kernel.map(|k| k as u64);
            let (h, w) = (input.height as u64, input.width as u64);
            let fill = (kd - 1) * h * w + (kh - 1) * w + kw;
            fill * per_stream + ceil_log2(kh * kw * kd)
        }
        LayerOp::Activation(_) | LayerOp::ElementWise { .. } => 1,
        LayerOp::GlobalAvgPool => input.volume() * per_stream,
    }
}
