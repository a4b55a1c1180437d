//! Synchronous dataflow graph of one partition.
//!
//! Columns of the `S`, `R` and `Gamma` matrices are nodes (memory inputs,
//! blocks, memory outputs, in that order); rows are arcs. Producers carry
//! positive entries, consumers negative ones. Nodes may have several incoming
//! arcs (element-wise joins) and several outgoing arcs (fan-out), which is why
//! merge points get extra FIFO depth and rate equalisation.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;

use ndarray::Array2;
use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::hw_blocks::BlockConfig;
use crate::rate::Rate;
use crate::resource_model::DeviceSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemDirection {
    In,
    Out,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryNode {
    pub direction: MemDirection,
    pub streams: usize,
    /// Per-stream rate granted by this node's bandwidth share.
    pub rate: Rate,
    /// True when the node links to a neighbouring partition rather than to a
    /// graph input or output.
    pub boundary: bool,
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum SdfNodeKind {
    Mem(MemoryNode),
    Block(BlockConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdfNode {
    pub name: String,
    pub kind: SdfNodeKind,
}

impl SdfNode {
    pub fn depth(&self) -> u64 {
        match &self.kind {
            SdfNodeKind::Block(b) => b.depth,
            SdfNodeKind::Mem(_) => 0,
        }
    }

    pub fn block(&self) -> Option<&BlockConfig> {
        match &self.kind {
            SdfNodeKind::Block(b) => Some(b),
            SdfNodeKind::Mem(_) => None,
        }
    }

    pub fn memory(&self) -> Option<&MemoryNode> {
        match &self.kind {
            SdfNodeKind::Mem(m) => Some(m),
            SdfNodeKind::Block(_) => None,
        }
    }

    pub fn is_memory(&self) -> bool {
        matches!(self.kind, SdfNodeKind::Mem(_))
    }
}

/// One producer/consumer channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub producer: usize,
    pub consumer: usize,
    /// Input slot at the consumer.
    pub slot: usize,
    /// Elements transferred per inference.
    pub elements: u64,
    pub producer_streams: usize,
    pub consumer_streams: usize,
    pub producer_rate: Rate,
    pub consumer_rate: Rate,
}

impl Channel {
    /// Aggregate production rate `S * R` (elements per cycle).
    pub fn gamma_producer(&self) -> Rate {
        self.producer_rate.scale(self.producer_streams as u64)
    }

    /// Aggregate consumption rate, as a magnitude.
    pub fn gamma_consumer(&self) -> Rate {
        self.consumer_rate.scale(self.consumer_streams as u64)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SdfOptions {
    /// Reject stream-count mismatches instead of inserting width adapters.
    pub strict_streams: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdfGraph {
    pub nodes: Vec<SdfNode>,
    pub arcs: Vec<Channel>,
    pub s: Array2<f64>,
    pub r: Array2<f64>,
    pub gamma: Array2<f64>,
    /// Extra FIFO depth (cycles) on the incoming arcs of merge nodes.
    pub merge_buffers: BTreeMap<usize, u64>,
}

impl SdfGraph {
    fn empty() -> Self {
        SdfGraph {
            nodes: vec![],
            arcs: vec![],
            s: Array2::zeros((0, 0)),
            r: Array2::zeros((0, 0)),
            gamma: Array2::zeros((0, 0)),
            merge_buffers: BTreeMap::new(),
        }
    }

    pub fn incoming(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.arcs.iter().enumerate().filter(move |(_, a)| a.consumer == node).map(|(i, _)| i)
    }

    pub fn outgoing(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.arcs.iter().enumerate().filter(move |(_, a)| a.producer == node).map(|(i, _)| i)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BlockConfig> {
        self.nodes.iter().filter_map(SdfNode::block)
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Node indices in topological order (Kahn, lowest index first).
    pub fn topo_order(&self) -> Vec<usize> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut succ = vec![Vec::new(); n];
        for a in &self.arcs {
            indegree[a.consumer] += 1;
            succ[a.producer].push(a.consumer);
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &c in &succ[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        order
    }

    /// Rebuilds `S`, `R` and `Gamma` from the channel list.
    pub fn refresh_matrices(&mut self) {
        let shape = (self.arcs.len(), self.nodes.len());
        let mut s = Array2::zeros(shape);
        let mut r = Array2::zeros(shape);
        let mut gamma = Array2::zeros(shape);
        for (i, a) in self.arcs.iter().enumerate() {
            s[[i, a.producer]] = a.producer_streams as f64;
            s[[i, a.consumer]] = a.consumer_streams as f64;
            r[[i, a.producer]] = a.producer_rate.to_f64();
            r[[i, a.consumer]] = a.consumer_rate.to_f64();
            gamma[[i, a.producer]] = a.gamma_producer().to_f64();
            gamma[[i, a.consumer]] = -a.gamma_consumer().to_f64();
        }
        self.s = s;
        self.r = r;
        self.gamma = gamma;
    }

    /// Critical-path fill depth: node depths plus merge buffering along the
    /// longest input-to-output path.
    pub fn pipeline_depth(&self) -> u64 {
        arrival_depths(self).into_iter().max().unwrap_or(0)
    }

    pub fn arc_label(&self, arc: usize) -> String {
        let a = &self.arcs[arc];
        format!("{}->{}", self.nodes[a.producer].name, self.nodes[a.consumer].name)
    }

    /// CSV dump of one of the matrices: arcs as rows, nodes as columns.
    pub fn matrix_csv(&self, m: &Array2<f64>) -> String {
        let mut out = String::from("arc");
        for n in &self.nodes {
            out.push(',');
            out.push_str(&n.name);
        }
        out.push('\n');
        for (i, row) in m.rows().into_iter().enumerate() {
            out.push_str(&self.arc_label(i));
            for v in row {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Per-stream rate of a memory node. The node's total share is truncated
/// first and then split exactly, so more streams never lose bandwidth.
fn mem_rate(words_per_cycle: f64, streams: usize) -> Rate {
    if words_per_cycle >= streams as f64 {
        Rate::ONE
    } else {
        let total = Rate::from_f64(words_per_cycle);
        Rate::new(total.numer(), total.denom() * streams as u64)
    }
}

/// Assembles the SDF graph of a partition.
///
/// `blocks` are the partition's layers in topological order; `dag_arcs` may be
/// the whole model's arc list, arcs that cross the partition boundary become
/// memory nodes.
pub fn build_sdfg(
    blocks: &[BlockConfig],
    dag_arcs: &[(String, String)],
    device: &DeviceSpec,
    opts: SdfOptions,
) -> Result<SdfGraph> {
    if blocks.is_empty() {
        return Ok(SdfGraph::empty());
    }
    let index: HashMap<&str, usize> = blocks.iter().enumerate().map(|(i, b)| (b.layer.id.as_str(), i)).collect();

    let mut inputs: Vec<Vec<&str>> = vec![Vec::new(); blocks.len()];
    let mut has_consumer = vec![false; blocks.len()];
    let mut leaves = vec![false; blocks.len()];
    for (p, c) in dag_arcs {
        if let Some(&ci) = index.get(c.as_str()) {
            inputs[ci].push(p.as_str());
        }
        if let Some(&pi) = index.get(p.as_str()) {
            has_consumer[pi] = true;
            if !index.contains_key(c.as_str()) {
                leaves[pi] = true;
            }
        }
    }

    // (consumer block, slot, boundary)
    let mut mem_in: Vec<(usize, usize, bool)> = Vec::new();
    for (bi, ins) in inputs.iter().enumerate() {
        if ins.is_empty() {
            mem_in.push((bi, 0, false));
        }
        for (slot, p) in ins.iter().enumerate() {
            if !index.contains_key(p) {
                mem_in.push((bi, slot, true));
            }
        }
    }
    // (producer block, boundary)
    let mem_out: Vec<(usize, bool)> = (0..blocks.len())
        .filter(|&bi| !has_consumer[bi] || leaves[bi])
        .map(|bi| (bi, has_consumer[bi]))
        .collect();

    let n_in = mem_in.len();
    let n_mem = n_in + mem_out.len();
    let wpc = device.words_per_cycle();
    let (in_share, out_share) = match device.bandwidth_in_fraction {
        Some(f) => (wpc * f / n_in as f64, wpc * (1.0 - f) / mem_out.len() as f64),
        None => (wpc / n_mem as f64, wpc / n_mem as f64),
    };

    let block_col = |bi: usize| n_in + bi;
    let mut nodes = Vec::with_capacity(n_mem + blocks.len());
    let mut arcs = Vec::new();

    for (k, &(bi, slot, boundary)) in mem_in.iter().enumerate() {
        let b = &blocks[bi];
        let streams = b.s_i;
        let rate = mem_rate(in_share, streams);
        nodes.push(SdfNode {
            name: format!("mem_in{k}"),
            kind: SdfNodeKind::Mem(MemoryNode { direction: MemDirection::In, streams, rate, boundary }),
        });
        arcs.push(Channel {
            producer: k,
            consumer: block_col(bi),
            slot,
            elements: b.layer.input_shapes[slot].elements(),
            producer_streams: streams,
            consumer_streams: b.s_i,
            producer_rate: rate,
            consumer_rate: b.rates.r_in[slot],
        });
    }
    for b in blocks {
        nodes.push(SdfNode { name: b.layer.id.clone(), kind: SdfNodeKind::Block(b.clone()) });
    }
    for (ci, ins) in inputs.iter().enumerate() {
        for (slot, p) in ins.iter().enumerate() {
            let Some(&pi) = index.get(p) else { continue };
            let (prod, cons) = (&blocks[pi], &blocks[ci]);
            let mut producer_rate = prod.rates.r_out;
            let mut consumer_rate = cons.rates.r_in[slot];
            if prod.s_o != cons.s_i {
                if opts.strict_streams {
                    return Err(Error::StreamMismatch {
                        producer: prod.layer.id.clone(),
                        consumer: cons.layer.id.clone(),
                        produced: prod.s_o,
                        consumed: cons.s_i,
                    });
                }
                let (lo, hi) = (prod.s_o.min(cons.s_i) as u64, prod.s_o.max(cons.s_i) as u64);
                let penalty = Rate::new(lo, hi);
                if prod.s_o > cons.s_i {
                    producer_rate = producer_rate * penalty;
                } else {
                    consumer_rate = consumer_rate * penalty;
                }
            }
            arcs.push(Channel {
                producer: block_col(pi),
                consumer: block_col(ci),
                slot,
                elements: prod.layer.output_shape.elements(),
                producer_streams: prod.s_o,
                consumer_streams: cons.s_i,
                producer_rate,
                consumer_rate,
            });
        }
    }
    let first_out = n_in + blocks.len();
    for (k, &(bi, boundary)) in mem_out.iter().enumerate() {
        let b = &blocks[bi];
        let streams = b.s_o;
        let rate = mem_rate(out_share, streams);
        nodes.push(SdfNode {
            name: format!("mem_out{k}"),
            kind: SdfNodeKind::Mem(MemoryNode { direction: MemDirection::Out, streams, rate, boundary }),
        });
        arcs.push(Channel {
            producer: block_col(bi),
            consumer: first_out + k,
            slot: 0,
            elements: b.layer.output_shape.elements(),
            producer_streams: b.s_o,
            consumer_streams: streams,
            producer_rate: b.rates.r_out,
            consumer_rate: rate,
        });
    }
    arcs.sort_by_key(|a| (a.producer, a.consumer, a.slot));

    let mut graph = SdfGraph { nodes, arcs, ..SdfGraph::empty() };
    let components = weak_components(&graph);
    if components > 1 {
        return Err(Error::DisconnectedGraph { components });
    }
    graph.merge_buffers = size_merge_buffers(&graph)?;
    let mut graph = equalize_merge_rates(&graph);
    graph.refresh_matrices();
    Ok(graph)
}

fn weak_components(g: &SdfGraph) -> usize {
    let n = g.nodes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for a in &g.arcs {
        let (x, y) = (find(&mut parent, a.producer), find(&mut parent, a.consumer));
        parent[x] = y;
    }
    (0..n).filter(|&i| find(&mut parent, i) == i).count()
}

fn reachable_from(g: &SdfGraph, start: usize) -> Vec<bool> {
    let mut seen = vec![false; g.nodes.len()];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(n) = queue.pop_front() {
        for a in g.outgoing(n) {
            let c = g.arcs[a].consumer;
            if !seen[c] {
                seen[c] = true;
                queue.push_back(c);
            }
        }
    }
    seen
}

/// Longest-path arrival depth at every node, with merge nodes waiting for
/// their slowest input.
fn arrival_depths(g: &SdfGraph) -> Vec<u64> {
    let mut arrival = vec![0u64; g.nodes.len()];
    for n in g.topo_order() {
        let upstream = g.incoming(n).map(|a| arrival[g.arcs[a].producer]).max().unwrap_or(0);
        arrival[n] = upstream + g.nodes[n].depth();
    }
    arrival
}

/// Extra FIFO depth for each incoming arc of every merge node so both
/// operands reach the join together.
pub fn size_merge_buffers(graph: &SdfGraph) -> Result<BTreeMap<usize, u64>> {
    check_reconvergence(graph)?;
    let arrival = arrival_depths(graph);
    let mut buffers = BTreeMap::new();
    for n in 0..graph.nodes.len() {
        let ins: Vec<usize> = graph.incoming(n).collect();
        if ins.len() < 2 {
            continue;
        }
        let deepest = ins.iter().map(|&a| arrival[graph.arcs[a].producer]).max().unwrap();
        for a in ins {
            buffers.insert(a, deepest - arrival[graph.arcs[a].producer]);
        }
    }
    Ok(buffers)
}

/// A fork is non-reconvergent when one branch reaches a boundary memory
/// output that another branch of the same fork never reaches.
fn check_reconvergence(graph: &SdfGraph) -> Result<()> {
    let boundary_outs: Vec<usize> = graph
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| matches!(n.memory(), Some(m) if m.direction == MemDirection::Out && m.boundary))
        .map(|(i, _)| i)
        .collect();
    if boundary_outs.is_empty() {
        return Ok(());
    }
    for n in 0..graph.nodes.len() {
        let succ: Vec<usize> = graph.outgoing(n).map(|a| graph.arcs[a].consumer).collect();
        if succ.len() < 2 {
            continue;
        }
        let reach: Vec<Vec<bool>> = succ.iter().map(|&s| reachable_from(graph, s)).collect();
        for &m in &boundary_outs {
            let hits = reach.iter().filter(|r| r[m]).count();
            if hits > 0 && hits < reach.len() {
                return Err(Error::NonReconvergentBranch { fork: graph.nodes[n].name.clone() });
            }
        }
    }
    Ok(())
}

type Cycles = Ratio<u64>;

/// Cycles a node needs per inference on its slowest arc.
pub(crate) fn node_intervals(g: &SdfGraph) -> Vec<Cycles> {
    let mut ii = vec![Cycles::from_integer(0); g.nodes.len()];
    for a in &g.arcs {
        let prod = Cycles::new(a.elements, 1) / to_ratio(a.gamma_producer());
        let cons = Cycles::new(a.elements, 1) / to_ratio(a.gamma_consumer());
        ii[a.producer] = ii[a.producer].max(prod);
        ii[a.consumer] = ii[a.consumer].max(cons);
    }
    ii
}

fn to_ratio(r: Rate) -> Ratio<u64> {
    Ratio::new(r.numer(), r.denom())
}

fn from_ratio(r: Ratio<u64>) -> Rate {
    Rate::new(*r.numer(), *r.denom())
}

/// Lowers the input rates of every merge node to the slower of its arriving
/// streams, and its output rate to match. Iterates to a fixpoint.
pub fn equalize_merge_rates(graph: &SdfGraph) -> SdfGraph {
    let mut g = graph.clone();
    let order = g.topo_order();
    loop {
        let node_ii = node_intervals(&g);
        let mut upstream = node_ii.clone();
        for &n in &order {
            for a in g.incoming(n).collect::<Vec<_>>() {
                let p = g.arcs[a].producer;
                upstream[n] = upstream[n].max(upstream[p]);
            }
        }
        let mut changed = false;
        for n in 0..g.nodes.len() {
            let ins: Vec<usize> = g.incoming(n).collect();
            if ins.len() < 2 {
                continue;
            }
            let common = ins.iter().map(|&a| upstream[g.arcs[a].producer]).max().unwrap();
            if *common.numer() == 0 {
                continue;
            }
            for &a in &ins {
                let ch = &mut g.arcs[a];
                let target = from_ratio(Cycles::new(ch.elements, ch.consumer_streams as u64) / common);
                if target < ch.consumer_rate {
                    ch.consumer_rate = target;
                    changed = true;
                }
            }
            for a in g.outgoing(n).collect::<Vec<_>>() {
                let ch = &mut g.arcs[a];
                let target = from_ratio(Cycles::new(ch.elements, ch.producer_streams as u64) / common);
                if target < ch.producer_rate {
                    ch.producer_rate = target;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    g.refresh_matrices();
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hw_blocks::make_block;
    use crate::model_ir::{ActivationType, EwMode, EwType, ModelBuilder, ModelDag, TensorShape};
    use crate::resource_model::DeviceSpec;

    pub(crate) fn unbounded_device() -> DeviceSpec {
        DeviceSpec::from_json(
            r#"{"name":"inf","dsp":100000,"bram18":100000,"lut":10000000,"ff":10000000,
                "bandwidth_gbps":1e9,"clock_mhz":160,"reconfig_time_ms":1}"#,
        )
        .unwrap()
    }

    fn minimal_blocks(dag: &ModelDag) -> Vec<BlockConfig> {
        dag.layers_in_order().map(|l| make_block(l, 1, 1, 1).unwrap()).collect()
    }

    fn residual() -> ModelDag {
        let mut b = ModelBuilder::new("res");
        let r = b.input_activation("relu", TensorShape::new(1, 8, 8, 8), ActivationType::Relu);
        let c1 = b.conv("conv1", &r, 1, [3, 3, 3], [1, 1, 1], [1, 1, 1], 1);
        let s = b.activation("swish", &c1, ActivationType::Swish);
        let c2 = b.conv("conv2", &s, 1, [3, 3, 3], [1, 1, 1], [1, 1, 1], 1);
        b.elementwise("add", &c2, &r, EwType::Add, EwMode::Normal);
        b.build().unwrap()
    }

    #[test]
    fn identity_chain_matrices() {
        let mut b = ModelBuilder::new("chain");
        b.input_activation("relu", TensorShape::new(1, 2, 2, 2), ActivationType::Relu);
        let dag = b.build().unwrap();
        let g = build_sdfg(&minimal_blocks(&dag), &dag.arcs, &unbounded_device(), SdfOptions::default()).unwrap();
        assert_eq!(g.nodes.len(), 3);
        assert_eq!(g.gamma.row(0).to_vec(), vec![1.0, -1.0, 0.0]);
        assert_eq!(g.gamma.row(1).to_vec(), vec![0.0, 1.0, -1.0]);
    }

    #[test]
    fn gamma_is_streams_times_rate() {
        let mut b = ModelBuilder::new("g");
        let r = b.input_activation("r", TensorShape::new(4, 4, 4, 4), ActivationType::Relu);
        let p = b.pool("p", &r, [2, 1, 1], [2, 1, 1], [0, 0, 0]);
        b.activation("o", &p, ActivationType::Relu);
        let dag = b.build().unwrap();
        let blocks: Vec<_> = dag.layers_in_order().map(|l| make_block(l, 4, 4, 1).unwrap()).collect();
        let g = build_sdfg(&blocks, &dag.arcs, &unbounded_device(), SdfOptions::default()).unwrap();
        let pool = g.node_index("p").unwrap();
        let arc = g.outgoing(pool).next().unwrap();
        assert_eq!(g.r[[arc, pool]], 0.5);
        assert_eq!(g.gamma[[arc, pool]], 2.0);
    }

    #[test]
    fn residual_join_has_two_consumer_rows() {
        let dag = residual();
        let g = build_sdfg(&minimal_blocks(&dag), &dag.arcs, &unbounded_device(), SdfOptions::default()).unwrap();
        let add = g.node_index("add").unwrap();
        let negative: Vec<usize> = (0..g.arcs.len()).filter(|&a| g.gamma[[a, add]] < 0.0).collect();
        assert_eq!(negative.len(), 2);
        assert_ne!(negative[0], negative[1]);
        let skip = g.incoming(add).find(|&a| g.nodes[g.arcs[a].producer].name == "relu").unwrap();
        // conv1 + swish + conv2 = 152 + 1 + 152
        assert_eq!(g.merge_buffers[&skip], 305);
    }

    #[test]
    fn symmetric_branch_needs_no_buffer() {
        let mut b = ModelBuilder::new("sym");
        let x = b.input_activation("x", TensorShape::new(2, 4, 4, 4), ActivationType::Relu);
        let l = b.activation("l", &x, ActivationType::Relu);
        let r = b.activation("r", &x, ActivationType::Sigmoid);
        b.elementwise("j", &l, &r, EwType::Add, EwMode::Normal);
        let dag = b.build().unwrap();
        let g = build_sdfg(&minimal_blocks(&dag), &dag.arcs, &unbounded_device(), SdfOptions::default()).unwrap();
        assert!(g.merge_buffers.values().all(|&d| d == 0));
        assert_eq!(g.merge_buffers.len(), 2);
    }

    #[test]
    fn stream_mismatch_is_penalised_or_rejected() {
        let mut b = ModelBuilder::new("mm");
        let x = b.input_activation("x", TensorShape::new(4, 2, 2, 2), ActivationType::Relu);
        b.activation("y", &x, ActivationType::Relu);
        let dag = b.build().unwrap();
        let blocks = vec![
            make_block(dag.layer("x").unwrap(), 4, 4, 1).unwrap(),
            make_block(dag.layer("y").unwrap(), 2, 2, 1).unwrap(),
        ];
        let strict = SdfOptions { strict_streams: true };
        assert!(matches!(
            build_sdfg(&blocks, &dag.arcs, &unbounded_device(), strict),
            Err(Error::StreamMismatch { .. })
        ));
        let g = build_sdfg(&blocks, &dag.arcs, &unbounded_device(), SdfOptions::default()).unwrap();
        let x = g.node_index("x").unwrap();
        let arc = g.outgoing(x).next().unwrap();
        assert_eq!(g.gamma[[arc, x]], 2.0);
    }

    #[test]
    fn merge_rates_take_the_slower_arrival() {
        let mut b = ModelBuilder::new("eq");
        let x = b.input_activation("x", TensorShape::new(1, 4, 4, 4), ActivationType::Relu);
        let c = b.conv("c", &x, 1, [1, 2, 2], [1, 1, 1], [0, 1, 1], 1);
        let c = b.pool("p", &c, [1, 2, 2], [1, 1, 1], [0, 0, 0]);
        b.elementwise("j", &x, &c, EwType::Add, EwMode::Normal);
        let dag = b.build().unwrap();
        let mut blocks = minimal_blocks(&dag);
        blocks[1] = make_block(dag.layer("c").unwrap(), 1, 1, 1).unwrap();
        let g = build_sdfg(&blocks, &dag.arcs, &unbounded_device(), SdfOptions::default()).unwrap();
        let j = g.node_index("j").unwrap();
        let rates: Vec<f64> = g.incoming(j).map(|a| g.r[[a, j]]).collect();
        assert_eq!(rates, vec![0.25, 0.25]);
        let again = equalize_merge_rates(&g);
        assert_eq!(again, g);
    }

    /// The graph with every block-side rate reset to the block's own rate.
    fn unequalized(g: &SdfGraph) -> SdfGraph {
        let mut raw = g.clone();
        for ch in &mut raw.arcs {
            if let Some(b) = g.nodes[ch.producer].block() {
                ch.producer_rate = b.rates.r_out;
            }
            if let Some(b) = g.nodes[ch.consumer].block() {
                ch.consumer_rate = b.rates.r_in[ch.slot];
            }
        }
        raw.refresh_matrices();
        raw
    }

    /// One topological pass: each join's inputs and outputs are slowed to
    /// the slowest node interval among its ancestors.
    fn single_pass_rates(g: &SdfGraph) -> Vec<(f64, f64)> {
        let n = g.nodes.len();
        let mut ii = vec![0.0f64; n];
        for ch in &g.arcs {
            ii[ch.producer] = ii[ch.producer].max(ch.elements as f64 / (ch.producer_streams as f64 * ch.producer_rate.to_f64()));
            ii[ch.consumer] = ii[ch.consumer].max(ch.elements as f64 / (ch.consumer_streams as f64 * ch.consumer_rate.to_f64()));
        }
        let mut up = ii.clone();
        let mut common = vec![None; n];
        for v in g.topo_order() {
            let preds: Vec<usize> = g.incoming(v).map(|a| g.arcs[a].producer).collect();
            let slowest = preds.iter().map(|&p| up[p]).fold(0.0, f64::max);
            up[v] = up[v].max(slowest);
            if preds.len() > 1 {
                common[v] = Some(slowest);
            }
        }
        g.arcs
            .iter()
            .map(|ch| {
                let cap = |c: Option<f64>, streams: usize, r: f64| c.map_or(r, |c| r.min(ch.elements as f64 / (streams as f64 * c)));
                (
                    cap(common[ch.producer], ch.producer_streams, ch.producer_rate.to_f64()),
                    cap(common[ch.consumer], ch.consumer_streams, ch.consumer_rate.to_f64()),
                )
            })
            .collect()
    }

    #[test]
    fn join_cascade_matches_single_pass() {
        let mut b = ModelBuilder::new("cascade");
        let x = b.input_activation("x", TensorShape::new(2, 4, 4, 2), ActivationType::Relu);
        let a = b.conv("a", &x, 2, [3, 3, 1], [1, 1, 1], [1, 1, 0], 1);
        let j1 = b.elementwise("j1", &a, &x, EwType::Add, EwMode::Normal);
        let c = b.activation("c", &j1, ActivationType::Sigmoid);
        let j2 = b.elementwise("j2", &c, &j1, EwType::Add, EwMode::Normal);
        let d = b.conv("d", &j2, 2, [1, 1, 3], [1, 1, 1], [0, 0, 1], 1);
        let j3 = b.elementwise("j3", &d, &j2, EwType::Mul, EwMode::Normal);
        b.activation("out", &j3, ActivationType::Relu);
        let dag = b.build().unwrap();
        let blocks: Vec<_> = dag
            .layers_in_order()
            .map(|l| make_block(l, 2, 2, if l.id == "a" { 2 } else { 1 }).unwrap())
            .collect();
        let built = build_sdfg(&blocks, &dag.arcs, &unbounded_device(), SdfOptions::default()).unwrap();
        let raw = unequalized(&built);
        assert_ne!(raw.r, built.r);
        let fixed = equalize_merge_rates(&raw);
        assert_eq!(fixed.r, built.r);
        for (ch, (p, c)) in fixed.arcs.iter().zip(single_pass_rates(&raw)) {
            assert!((ch.producer_rate.to_f64() - p).abs() < 1e-12);
            assert!((ch.consumer_rate.to_f64() - c).abs() < 1e-12);
        }
        // All three joins end up on the slow conv's interval.
        let j3 = fixed.node_index("j3").unwrap();
        let j1 = fixed.node_index("j1").unwrap();
        let into = |n: usize| fixed.incoming(n).map(|a| fixed.r[[a, n]]).collect::<Vec<_>>();
        assert_eq!(into(j1), into(j3));
        assert!(into(j1)[0] < 1.0);
    }

    #[test]
    fn disconnected_partition_is_rejected() {
        let mut b = ModelBuilder::new("two");
        b.input_activation("a", TensorShape::new(1, 2, 2, 2), ActivationType::Relu);
        b.input_activation("b", TensorShape::new(1, 2, 2, 2), ActivationType::Relu);
        let dag = b.build().unwrap();
        assert!(matches!(
            build_sdfg(&minimal_blocks(&dag), &dag.arcs, &unbounded_device(), SdfOptions::default()),
            Err(Error::DisconnectedGraph { components: 2 })
        ));
    }

    #[test]
    fn straddling_branch_is_non_reconvergent() {
        let dag = residual();
        let blocks: Vec<_> = minimal_blocks(&dag).into_iter().filter(|b| b.layer.id != "add").collect();
        assert!(matches!(
            build_sdfg(&blocks, &dag.arcs, &unbounded_device(), SdfOptions::default()),
            Err(Error::NonReconvergentBranch { .. })
        ));
    }

    #[test]
    fn sequential_gamma_is_upper_bidiagonal() {
        let mut b = ModelBuilder::new("seq");
        let x = b.input_activation("a", TensorShape::new(2, 4, 4, 4), ActivationType::Relu);
        let y = b.conv("b", &x, 4, [3, 3, 3], [1, 1, 1], [1, 1, 1], 1);
        let z = b.pool("c", &y, [2, 2, 2], [2, 2, 2], [0, 0, 0]);
        b.activation("d", &z, ActivationType::Sigmoid);
        let dag = b.build().unwrap();
        let g = build_sdfg(&minimal_blocks(&dag), &dag.arcs, &unbounded_device(), SdfOptions::default()).unwrap();
        assert_eq!(g.arcs.len(), g.nodes.len() - 1);
        for ((a, n), &v) in g.gamma.indexed_iter() {
            if n == a {
                assert!(v > 0.0);
            } else if n == a + 1 {
                assert!(v < 0.0);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }
}
