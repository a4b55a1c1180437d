//! Cycle-stepped token-flow simulator for partition graphs.
//!
//! Every node advances through `P` work items per inference, where `P` is the
//! token count of its first input arc (or first output arc for sources).
//! Reaching item `p` requires `ceil(p * W_a / P)` tokens on input arc `a` and
//! emits `floor(p * W_b / P)` tokens on output arc `b`. Items are issued from
//! an integer credit accumulator at the node's rate, outputs become visible
//! `depth` cycles later, and bounded FIFOs push back on producers.

use std::collections::VecDeque;
use std::fmt::Write as _;

use num_integer::Integer;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hw_blocks::make_block;
use crate::model_ir::{ActivationType, EwMode, EwType, ModelBuilder, ModelDag, TensorShape};
use crate::perf_model::{build_workload_matrix, initiation_interval, WorkloadMatrix};
use crate::rate::Rate;
use crate::resource_model::DeviceSpec;
use crate::sdfg::{build_sdfg, SdfGraph, SdfOptions};

#[derive(Clone, Debug, PartialEq)]
pub enum FifoDepths {
    /// `slack` tokens plus room for the producer's pipeline and any merge
    /// buffer on the arc.
    Sized { slack: u64 },
    Unbounded,
    /// Capacity in tokens, per arc.
    Explicit(Vec<u64>),
}

impl Default for FifoDepths {
    fn default() -> Self {
        FifoDepths::Sized { slack: 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOptions {
    pub batch: u64,
    pub fifo: FifoDepths,
    pub max_cycles: u64,
    /// Record one CSV row per firing.
    pub trace: bool,
}

impl SimOptions {
    pub fn new(batch: u64) -> Self {
        SimOptions { batch, fifo: FifoDepths::default(), max_cycles: 50_000_000, trace: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimResult {
    /// Mean gap between inference completions over the second half of the batch.
    pub measured_ii: f64,
    /// Cycle at which the first token reached a memory output.
    pub measured_fill: u64,
    /// Cycles until the last token of the batch was written.
    pub completion_cycles: u64,
    /// Completion cycle of each inference.
    pub inference_done: Vec<u64>,
    /// Cycles in which the producer of each arc was held back by that arc.
    pub stalls: Vec<u64>,
    pub produced: Vec<u64>,
    pub consumed: Vec<u64>,
    #[serde(skip)]
    pub trace: Option<String>,
}

/// Exact non-negative fraction on `u128`.
#[derive(Clone, Copy, Debug)]
struct Frac {
    n: u128,
    d: u128,
}

impl Frac {
    fn new(n: u128, d: u128) -> Self {
        let g = n.gcd(&d).max(1);
        Frac { n: n / g, d: d / g }
    }

    fn of(r: Rate) -> Self {
        Frac::new(r.numer() as u128, r.denom() as u128)
    }

    fn mul(self, o: Frac) -> Frac {
        Frac::new(self.n * o.n, self.d * o.d)
    }

    fn less(self, o: Frac) -> bool {
        self.n * o.d < o.n * self.d
    }
}

struct NodeState {
    items: u64,
    total: u64,
    progress: u64,
    rate: Frac,
    credit: u128,
    cap: u128,
    depth: u64,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
    sink: bool,
}

struct ArcState {
    tokens: u64,
    capacity: u64,
    produced: u64,
    visible: u64,
    consumed: u64,
    pending: VecDeque<(u64, u64)>,
}

fn ceil_div(a: u128, b: u128) -> u128 {
    a.div_ceil(b)
}

pub fn simulate(graph: &SdfGraph, w: &WorkloadMatrix, opts: &SimOptions) -> Result<SimResult> {
    let batch = opts.batch.max(1);
    let tokens: Vec<u64> = graph.arcs.iter().enumerate().map(|(i, a)| w.w[[i, a.producer]].abs() as u64).collect();

    let mut arcs: Vec<ArcState> = graph
        .arcs
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let gamma = a.gamma_producer();
            let burst = gamma.numer().div_ceil(gamma.denom()).max(1);
            let capacity = match &opts.fifo {
                FifoDepths::Unbounded => u64::MAX / 4,
                FifoDepths::Explicit(c) => c[i],
                FifoDepths::Sized { slack } => {
                    let merge = graph.merge_buffers.get(&i).copied().unwrap_or(0);
                    slack * burst + (merge + graph.nodes[a.producer].depth() + 1) * burst
                }
            };
            ArcState { tokens: tokens[i], capacity, produced: 0, visible: 0, consumed: 0, pending: VecDeque::new() }
        })
        .collect();

    let mut nodes: Vec<NodeState> = Vec::with_capacity(graph.nodes.len());
    for (n, node) in graph.nodes.iter().enumerate() {
        let inputs: Vec<usize> = graph.incoming(n).collect();
        let mut inputs_by_slot = inputs.clone();
        inputs_by_slot.sort_by_key(|&a| graph.arcs[a].slot);
        let outputs: Vec<usize> = graph.outgoing(n).collect();
        let items = inputs_by_slot.first().or(outputs.first()).map(|&a| tokens[a]).unwrap_or(0);
        // items per cycle: min over arcs of Gamma * P / W
        let mut rate: Option<Frac> = None;
        for &a in &inputs {
            let g = Frac::of(graph.arcs[a].gamma_consumer());
            let r = g.mul(Frac::new(items as u128, tokens[a] as u128));
            rate = Some(match rate {
                Some(x) if x.less(r) => x,
                _ => r,
            });
        }
        for &a in &outputs {
            let g = Frac::of(graph.arcs[a].gamma_producer());
            let r = g.mul(Frac::new(items as u128, tokens[a] as u128));
            rate = Some(match rate {
                Some(x) if x.less(r) => x,
                _ => r,
            });
        }
        let rate = rate.unwrap_or(Frac { n: 0, d: 1 });
        if rate.n == 0 && items > 0 {
            return Err(Error::DivisionByZeroRate { arc: inputs.first().or(outputs.first()).copied().unwrap_or(0), node: node.name.clone() });
        }
        // one firing's worth of carry on top of a cycle's accrual, so steady
        // running never loses credit but a stalled node cannot bank a burst
        let cap = rate.n + rate.d - 1;
        nodes.push(NodeState {
            items,
            total: items * batch,
            progress: 0,
            rate,
            credit: cap,
            cap,
            depth: node.depth(),
            sink: outputs.is_empty(),
            inputs: inputs_by_slot,
            outputs,
        });
    }

    let order = graph.topo_order();
    let sinks: Vec<usize> = (0..nodes.len()).filter(|&n| nodes[n].sink).collect();
    let mut sink_done: Vec<Vec<u64>> = vec![Vec::new(); nodes.len()];
    let mut stalls = vec![0u64; arcs.len()];
    let mut fill: Option<u64> = None;
    let mut last_sink_fire = 0;
    let mut trace = opts.trace.then(|| String::from("cycle,node,items\n"));
    let mut cycle: u64 = 0;

    loop {
        if nodes.iter().all(|s| s.progress == s.total) {
            break;
        }
        if cycle >= opts.max_cycles {
            return Err(Error::SimulationBudget(opts.max_cycles));
        }
        for a in arcs.iter_mut() {
            while let Some(&(at, count)) = a.pending.front() {
                if at > cycle {
                    break;
                }
                a.visible = count;
                a.pending.pop_front();
            }
        }
        let mut fired = false;
        let mut waiting = false;
        for &n in &order {
            let s = &mut nodes[n];
            if s.progress == s.total {
                continue;
            }
            s.credit = (s.credit + s.rate.n).min(s.cap);
            let by_credit = (s.credit / s.rate.d) as u64;
            if by_credit == 0 {
                waiting = true;
                continue;
            }
            let p0 = s.progress as u128;
            let items = s.items as u128;
            let mut limit = (s.progress + by_credit).min(s.total) as u128;
            for &a in &s.inputs {
                let st = &arcs[a];
                limit = limit.min(st.visible as u128 * items / st.tokens as u128);
            }
            let mut blocked_by = None;
            for &b in &s.outputs {
                let st = &arcs[b];
                let room = st.consumed as u128 + st.capacity as u128 + 1;
                let max_p = ceil_div(room * items, st.tokens as u128) - 1;
                if max_p < limit {
                    limit = max_p;
                    blocked_by = Some(b);
                }
            }
            if let Some(b) = blocked_by {
                stalls[b] += 1;
            }
            if limit <= p0 {
                continue;
            }
            let k = (limit - p0) as u64;
            s.progress += k;
            s.credit -= k as u128 * s.rate.d;
            fired = true;
            let p = s.progress as u128;
            for &a in &s.inputs {
                let st = &mut arcs[a];
                st.consumed = ceil_div(p * st.tokens as u128, items) as u64;
            }
            for &b in &s.outputs {
                let st = &mut arcs[b];
                let produced = (p * st.tokens as u128 / items) as u64;
                if produced > st.produced {
                    st.produced = produced;
                    if s.depth == 0 {
                        st.visible = produced;
                    } else {
                        st.pending.push_back((cycle + s.depth, produced));
                    }
                }
            }
            if s.sink {
                fill.get_or_insert(cycle);
                last_sink_fire = cycle;
                let done = &mut sink_done[n];
                while (done.len() as u64) < s.progress / s.items {
                    done.push(cycle);
                }
            }
            if let Some(t) = trace.as_mut() {
                let _ = writeln!(t, "{cycle},{},{k}", graph.nodes[n].name);
            }
        }
        let in_flight = arcs.iter().any(|a| !a.pending.is_empty());
        if !fired && !waiting && !in_flight {
            return Err(Error::DeadlockDetected { cycle });
        }
        cycle += 1;
    }

    let inference_done: Vec<u64> = (0..batch as usize)
        .map(|i| sinks.iter().map(|&n| sink_done[n].get(i).copied().unwrap_or(0)).max().unwrap_or(0))
        .collect();
    let completion_cycles = if sinks.is_empty() { 0 } else { last_sink_fire + 1 };
    let measured_ii = if batch >= 2 {
        let half = (batch as usize - 1) / 2;
        let last = batch as usize - 1;
        if last > half {
            (inference_done[last] - inference_done[half]) as f64 / (last - half) as f64
        } else {
            0.0
        }
    } else {
        completion_cycles as f64
    };
    Ok(SimResult {
        measured_ii,
        measured_fill: fill.unwrap_or(0),
        completion_cycles,
        inference_done,
        stalls,
        produced: arcs.iter().map(|a| a.produced).collect(),
        consumed: arcs.iter().map(|a| a.consumed).collect(),
        trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Validation {
    pub analytic_cycles: f64,
    pub simulated_cycles: u64,
    pub error: f64,
}

/// Relative error of the analytic batch time against the simulator.
pub fn validate(graph: &SdfGraph, w: &WorkloadMatrix, batch: u64) -> Result<Validation> {
    let (_, ii_max) = initiation_interval(graph, w)?;
    let analytic = graph.pipeline_depth() as f64 + ii_max * (batch.max(1) - 1) as f64;
    let sim = simulate(graph, w, &SimOptions::new(batch))?;
    let simulated = sim.completion_cycles;
    Ok(Validation { analytic_cycles: analytic, simulated_cycles: simulated, error: (analytic - simulated as f64).abs() / simulated as f64 })
}

pub fn geometric_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    (xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum StructureClass {
    Sequential,
    Branch,
    MultiInput,
    MultiOutput,
}

impl std::fmt::Display for StructureClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StructureClass::Sequential => "sequential",
            StructureClass::Branch => "branch",
            StructureClass::MultiInput => "multi-input",
            StructureClass::MultiOutput => "multi-output",
        };
        f.write_str(s)
    }
}

fn suite_device() -> DeviceSpec {
    DeviceSpec::from_json(
        r#"{"name":"suite","dsp":100000,"bram18":100000,"lut":10000000,"ff":10000000,
            "bandwidth_gbps":25.6,"clock_mhz":100,"reconfig_time_ms":1}"#,
    )
    .expect("suite device is valid")
}

fn graph_of(dag: &ModelDag, par: &[(usize, usize, usize)]) -> SdfGraph {
    let blocks: Vec<_> = dag
        .layers_in_order()
        .zip(par)
        .map(|(l, &(si, so, pm))| make_block(l, si, so, pm).expect("suite parallelism is legal"))
        .collect();
    build_sdfg(&blocks, &dag.arcs, &suite_device(), SdfOptions::default()).expect("suite graph is valid")
}

/// Four small graphs, one per structural class.
pub fn bundled_suite() -> Vec<(StructureClass, SdfGraph)> {
    let mut out = Vec::new();

    let mut b = ModelBuilder::new("sequential");
    let x = b.input_conv("conv", TensorShape::new(2, 6, 6, 4), 4, [3, 3, 3], [1, 1, 1], [1, 1, 1], 1);
    let x = b.activation("relu", &x, ActivationType::Relu);
    let x = b.pool("pool", &x, [2, 2, 2], [2, 2, 2], [0, 0, 0]);
    b.activation("sig", &x, ActivationType::Sigmoid);
    let dag = b.build().unwrap();
    out.push((StructureClass::Sequential, graph_of(&dag, &[(2, 4, 9), (4, 4, 1), (4, 4, 1), (4, 4, 1)])));

    let mut b = ModelBuilder::new("branch");
    let r = b.input_activation("a_relu", TensorShape::new(2, 6, 6, 4), ActivationType::Relu);
    let c = b.conv("b_conv", &r, 2, [3, 3, 3], [1, 1, 1], [1, 1, 1], 1);
    let s = b.activation("c_swish", &c, ActivationType::Swish);
    let c = b.conv("d_conv", &s, 2, [3, 3, 3], [1, 1, 1], [1, 1, 1], 1);
    let j = b.elementwise("e_add", &c, &r, EwType::Add, EwMode::Normal);
    b.activation("f_relu", &j, ActivationType::Relu);
    let dag = b.build().unwrap();
    out.push((StructureClass::Branch, graph_of(&dag, &[(2, 2, 1), (2, 2, 27), (2, 2, 1), (2, 2, 9), (2, 2, 1), (2, 2, 1)])));

    let mut b = ModelBuilder::new("multi_input");
    let x = b.input_conv("a_conv", TensorShape::new(2, 6, 6, 4), 4, [1, 1, 1], [1, 1, 1], [0, 0, 0], 1);
    let y = b.input_activation("b_relu", TensorShape::new(4, 6, 6, 4), ActivationType::Relu);
    let j = b.elementwise("c_mul", &x, &y, EwType::Mul, EwMode::Normal);
    b.activation("d_sig", &j, ActivationType::Sigmoid);
    let dag = b.build().unwrap();
    out.push((StructureClass::MultiInput, graph_of(&dag, &[(1, 2, 1), (2, 2, 1), (2, 2, 1), (2, 2, 1)])));

    let mut b = ModelBuilder::new("multi_output");
    let x = b.input_conv("a_conv", TensorShape::new(2, 6, 6, 4), 4, [3, 3, 1], [1, 1, 1], [1, 1, 0], 1);
    b.activation("b_relu", &x, ActivationType::Relu);
    b.pool("c_pool", &x, [2, 2, 2], [2, 2, 2], [0, 0, 0]);
    let dag = b.build().unwrap();
    out.push((StructureClass::MultiOutput, graph_of(&dag, &[(2, 4, 9), (4, 4, 1), (4, 4, 1)])));

    out
}

/// Per-class relative errors of the bundled suite at `batch`.
pub fn validate_suite(batch: u64) -> Result<Vec<(StructureClass, Validation)>> {
    bundled_suite()
        .into_iter()
        .map(|(class, g)| {
            let w = build_workload_matrix(&g);
            validate(&g, &w, batch).map(|v| (class, v))
        })
        .collect()
}
