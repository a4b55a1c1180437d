//! Workload and initiation-interval matrices, partition execution time,
//! multi-partition time and throughput.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::resource_model::DeviceSpec;
use crate::sdfg::SdfGraph;

/// Elements moved per inference: positive at the producer column, negative at
/// the consumer column of each arc.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadMatrix {
    pub w: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerfReport {
    pub ii_max: f64,
    pub depth: u64,
    pub batch: u64,
    /// Seconds for the whole batch.
    pub t_batch: f64,
    pub workload_gops: f64,
    pub throughput_gops: f64,
    pub clips_per_s: f64,
}

pub fn build_workload_matrix(graph: &SdfGraph) -> WorkloadMatrix {
    let mut w = Array2::zeros((graph.arcs.len(), graph.nodes.len()));
    for (i, a) in graph.arcs.iter().enumerate() {
        w[[i, a.producer]] = a.elements as f64;
        w[[i, a.consumer]] = -(a.elements as f64);
    }
    WorkloadMatrix { w }
}

/// `II = |W| / |Gamma|` on the nonzero pattern, and its maximum.
pub fn initiation_interval(graph: &SdfGraph, w: &WorkloadMatrix) -> Result<(Array2<f64>, f64)> {
    let mut ii = Array2::zeros(w.w.dim());
    let mut ii_max: f64 = 0.0;
    for ((arc, node), &work) in w.w.indexed_iter() {
        if work == 0.0 {
            continue;
        }
        let g = graph.gamma[[arc, node]].abs();
        if g == 0.0 {
            return Err(Error::DivisionByZeroRate { arc, node: graph.nodes[node].name.clone() });
        }
        let v = work.abs() / g;
        ii[[arc, node]] = v;
        ii_max = ii_max.max(v);
    }
    Ok((ii, ii_max))
}

/// Seconds to push `batch` inferences through one partition.
pub fn partition_time(batch: u64, depth: f64, ii_max: f64, clock_hz: f64) -> f64 {
    assert!(batch >= 1, "batch must be at least 1");
    (depth + ii_max * (batch - 1) as f64) / clock_hz
}

/// Sum of partition times plus one reconfiguration per extra partition.
pub fn total_time(partition_times: &[f64], t_reconfig: f64) -> f64 {
    let n = partition_times.len();
    partition_times.iter().sum::<f64>() + n.saturating_sub(1) as f64 * t_reconfig
}

/// `(GOps/s, clips/s)`. GOps/s is derived from clips/s so that
/// `clips/s * workload == GOps/s` holds exactly.
pub fn throughput(workload_gops: f64, batch: u64, t_total: f64) -> (f64, f64) {
    assert!(t_total > 0.0, "total time must be positive");
    let clips = batch as f64 / t_total;
    (clips * workload_gops, clips)
}

/// Full analytic evaluation of one partition graph.
pub fn evaluate_graph(graph: &SdfGraph, workload_gops: f64, batch: u64, device: &DeviceSpec) -> Result<PerfReport> {
    let w = build_workload_matrix(graph);
    let (_, ii_max) = initiation_interval(graph, &w)?;
    let depth = graph.pipeline_depth();
    let t_batch = partition_time(batch, depth as f64, ii_max, device.clock_hz);
    let (throughput_gops, clips_per_s) =
        if t_batch > 0.0 { throughput(workload_gops, batch, t_batch) } else { (0.0, 0.0) };
    Ok(PerfReport { ii_max, depth, batch, t_batch, workload_gops, throughput_gops, clips_per_s })
}
