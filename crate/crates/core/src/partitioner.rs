//! Splitting a model into contiguous partitions separated by reconfiguration
//! points, and evaluating a full design (cuts plus per-layer parallelism).

use std::ops::Range;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hw_blocks::{make_block, max_parallelism, BlockConfig, Parallelism};
use crate::model_ir::{model_workload, LayerDescriptor, ModelDag};
use crate::perf_model::{evaluate_graph, throughput, total_time, PerfReport};
use crate::resource_model::{
    feasible_with, partition_resources_with, violation, DeviceSpec, LinearCostModel, ResourceEstimator, ResourceUsage,
};
use crate::sdfg::{build_sdfg, node_intervals, SdfGraph, SdfOptions};

/// One evaluated partition, covering topological positions `start..end`.
#[derive(Clone, Debug)]
pub struct PartitionEval {
    pub start: usize,
    pub end: usize,
    pub graph: SdfGraph,
    pub perf: PerfReport,
    pub resources: ResourceUsage,
    pub feasible: bool,
    pub violation: f64,
}

impl PartitionEval {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

/// A complete, evaluated design.
#[derive(Clone, Debug)]
pub struct DesignPoint {
    /// Sorted topological positions where a new partition starts.
    pub cuts: Vec<usize>,
    /// Per layer, indexed by topological position.
    pub parallelism: Vec<Parallelism>,
    pub partitions: Vec<Arc<PartitionEval>>,
    pub batch: u64,
    pub t_total: f64,
    pub throughput_gops: f64,
    pub clips_per_s: f64,
    pub feasible: bool,
    pub violation: f64,
}

impl DesignPoint {
    pub fn num_partitions(&self) -> usize {
        self.partitions.len()
    }

    /// Index of the partition holding topological position `pos`.
    pub fn partition_of(&self, pos: usize) -> usize {
        self.cuts.iter().filter(|&&c| c <= pos).count()
    }
}

pub fn ranges(cuts: &[usize], n: usize) -> Vec<Range<usize>> {
    let mut bounds = Vec::with_capacity(cuts.len() + 2);
    bounds.push(0);
    bounds.extend_from_slice(cuts);
    bounds.push(n);
    bounds.windows(2).map(|w| w[0]..w[1]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BottleneckCause {
    MemoryBound,
    ParallelismExhausted,
    ResourceBound,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Bottleneck {
    pub partition: usize,
    pub cause: BottleneckCause,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ToPrev,
    ToNext,
}

fn structural_device() -> DeviceSpec {
    DeviceSpec {
        name: "structural".into(),
        dsp_total: u64::MAX,
        bram18_total: u64::MAX,
        lut_total: u64::MAX,
        ff_total: u64::MAX,
        bandwidth: 1e18,
        clock_hz: 1e8,
        t_reconfig: 0.0,
        word_bits: 16,
        bandwidth_in_fraction: None,
    }
}

/// Topological positions `k` at which the model may be split: exactly one
/// arc crosses from `order[..k]` to `order[k..]` and both sides form valid
/// partition graphs on their own.
pub fn legal_cuts(dag: &ModelDag) -> Vec<usize> {
    let order = dag.order();
    let pos: std::collections::HashMap<&str, usize> =
        order.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let layers: Vec<&LayerDescriptor> = dag.layers_in_order().collect();
    let minimal = |r: Range<usize>| -> Vec<BlockConfig> {
        layers[r].iter().map(|l| make_block(l, 1, 1, 1).expect("minimal parallelism is legal")).collect()
    };
    let device = structural_device();
    (1..order.len())
        .filter(|&k| {
            let crossing = dag.arcs.iter().filter(|(p, c)| pos[p.as_str()] < k && pos[c.as_str()] >= k).count();
            crossing == 1
                && build_sdfg(&minimal(0..k), &dag.arcs, &device, SdfOptions::default()).is_ok()
                && build_sdfg(&minimal(k..order.len()), &dag.arcs, &device, SdfOptions::default()).is_ok()
        })
        .collect()
}

/// Everything needed to evaluate designs of one model on one device.
pub struct Problem {
    pub dag: ModelDag,
    pub layers: Vec<LayerDescriptor>,
    pub device: DeviceSpec,
    pub estimator: Arc<dyn ResourceEstimator>,
    pub options: SdfOptions,
    pub batch: u64,
    workload_gops: f64,
    legal_cuts: Vec<usize>,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem")
            .field("model", &self.dag.name)
            .field("device", &self.device.name)
            .field("batch", &self.batch)
            .finish()
    }
}

impl Problem {
    pub fn new(dag: ModelDag, device: DeviceSpec, batch: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        device.validate()?;
        let layers = dag.layers_in_order().cloned().collect();
        let legal_cuts = legal_cuts(&dag);
        let workload_gops = model_workload(&dag);
        Ok(Problem {
            dag,
            layers,
            device,
            estimator: Arc::new(LinearCostModel::default()),
            options: SdfOptions::default(),
            batch,
            workload_gops,
            legal_cuts,
            pool: None,
        })
    }

    pub fn with_estimator(mut self, estimator: Arc<dyn ResourceEstimator>) -> Self {
        self.estimator = estimator;
        self
    }

    pub fn with_options(mut self, options: SdfOptions) -> Self {
        self.options = options;
        self
    }

    /// Evaluates partitions on a pool of `jobs` threads (1 keeps it inline).
    pub fn with_jobs(mut self, jobs: usize) -> Result<Self> {
        self.pool = if jobs > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Some(Arc::new(pool))
        } else {
            None
        };
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn legal_cuts(&self) -> &[usize] {
        &self.legal_cuts
    }

    pub fn workload_gops(&self) -> f64 {
        self.workload_gops
    }

    pub fn minimal_parallelism(&self) -> Vec<Parallelism> {
        vec![Parallelism::MINIMAL; self.len()]
    }

    fn check_cuts(&self, cuts: &[usize]) -> Result<()> {
        if cuts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::IllegalMove(format!("cuts {cuts:?} are not strictly increasing")));
        }
        if let Some(bad) = cuts.iter().find(|c| !self.legal_cuts.contains(c)) {
            return Err(Error::IllegalMove(format!("no legal cut before position {bad}")));
        }
        Ok(())
    }

    fn evaluate_partition(&self, range: Range<usize>, parallelism: &[Parallelism]) -> Result<PartitionEval> {
        let blocks = range
            .clone()
            .map(|i| {
                let p = parallelism[i];
                make_block(&self.layers[i], p.s_i, p.s_o, p.p_mac)
            })
            .collect::<Result<Vec<_>>>()?;
        let workload = self.layers[range.clone()].iter().map(LayerDescriptor::macs).sum::<u64>() as f64 / 1e9;
        let graph = build_sdfg(&blocks, &self.dag.arcs, &self.device, self.options)?;
        let perf = evaluate_graph(&graph, workload, self.batch, &self.device)?;
        let resources = partition_resources_with(&graph, self.estimator.as_ref());
        let constraints = self.estimator.constraints();
        Ok(PartitionEval {
            start: range.start,
            end: range.end,
            feasible: feasible_with(&resources, &self.device, constraints),
            violation: violation(&resources, &self.device, constraints),
            graph,
            perf,
            resources,
        })
    }

    /// Evaluates a design from scratch.
    pub fn evaluate(&self, cuts: Vec<usize>, parallelism: Vec<Parallelism>) -> Result<DesignPoint> {
        self.assemble(None, cuts, parallelism)
    }

    /// Evaluates a design, reusing partitions of `base` whose range and
    /// parallelism are unchanged.
    pub fn reevaluate(&self, base: &DesignPoint, cuts: Vec<usize>, parallelism: Vec<Parallelism>) -> Result<DesignPoint> {
        self.assemble(Some(base), cuts, parallelism)
    }

    fn assemble(&self, base: Option<&DesignPoint>, cuts: Vec<usize>, parallelism: Vec<Parallelism>) -> Result<DesignPoint> {
        if parallelism.len() != self.len() {
            return Err(Error::Config(format!(
                "design has {} layer configurations, model has {} layers",
                parallelism.len(),
                self.len()
            )));
        }
        self.check_cuts(&cuts)?;
        let rs = if self.is_empty() { vec![] } else { ranges(&cuts, self.len()) };
        let reuse = |r: &Range<usize>| -> Option<Arc<PartitionEval>> {
            base?.partitions
                .iter()
                .find(|p| p.range() == *r && base.unwrap().parallelism[r.clone()] == parallelism[r.clone()])
                .cloned()
        };
        let eval = |r: &Range<usize>| -> Result<Arc<PartitionEval>> {
            match reuse(r) {
                Some(p) => Ok(p),
                None => self.evaluate_partition(r.clone(), &parallelism).map(Arc::new),
            }
        };
        let partitions = match &self.pool {
            Some(pool) if rs.len() > 1 => pool.install(|| rs.par_iter().map(eval).collect::<Result<Vec<_>>>())?,
            _ => rs.iter().map(eval).collect::<Result<Vec<_>>>()?,
        };
        let times: Vec<f64> = partitions.iter().map(|p| p.perf.t_batch).collect();
        let t_total = total_time(&times, self.device.t_reconfig);
        let (throughput_gops, clips_per_s) =
            if t_total > 0.0 { throughput(self.workload_gops, self.batch, t_total) } else { (0.0, 0.0) };
        Ok(DesignPoint {
            feasible: partitions.iter().all(|p| p.feasible),
            violation: partitions.iter().map(|p| p.violation).sum(),
            cuts,
            parallelism,
            partitions,
            batch: self.batch,
            t_total,
            throughput_gops,
            clips_per_s,
        })
    }

    /// `count` cuts drawn uniformly from the legal positions, with minimal
    /// parallelism everywhere.
    pub fn random_partitioning(&self, count: usize, seed: u64) -> Result<DesignPoint> {
        let available = self.legal_cuts.len();
        if count > available {
            return Err(Error::NotEnoughLegalCuts { requested: count, available });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cuts: Vec<usize> = sample(&mut rng, available, count).into_iter().map(|i| self.legal_cuts[i]).collect();
        cuts.sort_unstable();
        self.evaluate(cuts, self.minimal_parallelism())
    }

    /// Shifts the boundary layer of partition `idx` into its neighbour.
    pub fn move_layer(&self, dp: &DesignPoint, idx: usize, dir: Direction) -> Result<DesignPoint> {
        let n = dp.num_partitions();
        if idx >= n {
            return Err(Error::IllegalMove(format!("partition {idx} does not exist")));
        }
        let mut cuts = dp.cuts.clone();
        match dir {
            Direction::ToPrev => {
                if idx == 0 {
                    return Err(Error::IllegalMove("first partition has no predecessor".into()));
                }
                let next = cuts.get(idx).copied().unwrap_or(self.len());
                cuts[idx - 1] += 1;
                if cuts[idx - 1] >= next {
                    return Err(Error::IllegalMove(format!("moving would empty partition {idx}")));
                }
            }
            Direction::ToNext => {
                if idx + 1 >= n {
                    return Err(Error::IllegalMove("last partition has no successor".into()));
                }
                let prev = if idx == 0 { 0 } else { cuts[idx - 1] };
                if cuts[idx] - 1 <= prev {
                    return Err(Error::IllegalMove(format!("moving would empty partition {idx}")));
                }
                cuts[idx] -= 1;
            }
        }
        self.reevaluate(dp, cuts, dp.parallelism.clone())
    }

    pub fn add_cut(&self, dp: &DesignPoint, position: usize) -> Result<DesignPoint> {
        if dp.cuts.contains(&position) {
            return Err(Error::IllegalMove(format!("cut at {position} already present")));
        }
        let mut cuts = dp.cuts.clone();
        cuts.push(position);
        cuts.sort_unstable();
        self.reevaluate(dp, cuts, dp.parallelism.clone())
    }

    pub fn remove_cut(&self, dp: &DesignPoint, index: usize) -> Result<DesignPoint> {
        if index >= dp.cuts.len() {
            return Err(Error::IllegalMove(format!("cut {index} does not exist")));
        }
        let mut cuts = dp.cuts.clone();
        cuts.remove(index);
        self.reevaluate(dp, cuts, dp.parallelism.clone())
    }

    /// Partition with the largest initiation interval per unit of workload
    /// (lowest index on ties), and why it is slow.
    pub fn identify_bottleneck(&self, dp: &DesignPoint) -> Bottleneck {
        let score = |p: &PartitionEval| p.perf.ii_max / p.perf.workload_gops.max(f64::MIN_POSITIVE);
        let mut partition = 0;
        for (i, p) in dp.partitions.iter().enumerate() {
            if score(p) > score(&dp.partitions[partition]) {
                partition = i;
            }
        }
        let Some(p) = dp.partitions.get(partition) else {
            return Bottleneck { partition: 0, cause: BottleneckCause::ResourceBound };
        };
        let intervals = node_intervals(&p.graph);
        let worst = |memory: bool| {
            p.graph.nodes.iter().zip(&intervals).filter(|(n, _)| n.is_memory() == memory).map(|(_, &ii)| ii).max()
        };
        let memory_bound = worst(true) > worst(false);
        let exhausted = p.range().all(|i| dp.parallelism[i] == max_parallelism(&self.layers[i]));
        let cause = if memory_bound {
            BottleneckCause::MemoryBound
        } else if exhausted {
            BottleneckCause::ParallelismExhausted
        } else {
            BottleneckCause::ResourceBound
        };
        Bottleneck { partition, cause }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_ir::{ActivationType, EwMode, EwType, ModelBuilder, TensorShape};

    pub(crate) fn device(words_gbps: f64) -> DeviceSpec {
        DeviceSpec::from_json(&format!(
            r#"{{"name":"t","dsp":4096,"bram18":4096,"lut":1000000,"ff":1000000,
                "bandwidth_gbps":{words_gbps},"clock_mhz":100,"reconfig_time_ms":1}}"#
        ))
        .unwrap()
    }

    fn chain(n: usize) -> ModelDag {
        let mut b = ModelBuilder::new("chain");
        let mut x = b.input_activation("l0", TensorShape::new(2, 4, 4, 2), ActivationType::Relu);
        for i in 1..n {
            x = b.activation(&format!("l{i}"), &x, ActivationType::Relu);
        }
        b.build().unwrap()
    }

    fn residual() -> ModelDag {
        let mut b = ModelBuilder::new("res");
        let a = b.input_conv("a", TensorShape::new(2, 4, 4, 4), 4, [1, 1, 1], [1, 1, 1], [0, 0, 0], 1);
        let r = b.activation("b", &a, ActivationType::Relu);
        let c = b.conv("c", &r, 4, [3, 3, 3], [1, 1, 1], [1, 1, 1], 1);
        let s = b.activation("d", &c, ActivationType::Relu);
        let j = b.elementwise("e", &s, &r, EwType::Add, EwMode::Normal);
        b.activation("f", &j, ActivationType::Relu);
        b.build().unwrap()
    }

    /// Independent oracle: a position is a cut iff the undirected arc there
    /// is a bridge whose removal leaves the prefix and the suffix apart.
    fn bridge_cuts(dag: &ModelDag) -> Vec<usize> {
        let order = dag.order();
        let idx = |id: &str| order.iter().position(|o| o == id).unwrap();
        let edges: Vec<(usize, usize)> = dag.arcs.iter().map(|(p, c)| (idx(p), idx(c))).collect();
        let component_count = |skip: usize| {
            let mut label: Vec<usize> = (0..order.len()).collect();
            loop {
                let mut changed = false;
                for (e, &(u, v)) in edges.iter().enumerate() {
                    if e != skip && label[u] != label[v] {
                        let m = label[u].min(label[v]);
                        label[u] = m;
                        label[v] = m;
                        changed = true;
                    }
                }
                if !changed {
                    break;
                }
            }
            let mut l = label.clone();
            l.sort_unstable();
            l.dedup();
            (l.len(), label)
        };
        let mut cuts = vec![];
        for (e, &(u, v)) in edges.iter().enumerate() {
            let (count, label) = component_count(e);
            if count != 2 || label[u] == label[v] {
                continue;
            }
            let k = label.iter().filter(|&&l| l == label[u]).count();
            if (0..order.len()).all(|i| (label[i] == label[u]) == (i < k)) {
                cuts.push(k);
            }
        }
        cuts.sort_unstable();
        cuts.dedup();
        cuts
    }

    #[test]
    fn chain_cuts_and_singletons() {
        let dag = chain(10);
        let problem = Problem::new(dag, device(1e6), 4).unwrap();
        assert_eq!(problem.legal_cuts(), (1..10).collect::<Vec<_>>().as_slice());
        let dp = problem.random_partitioning(9, 1).unwrap();
        assert_eq!(dp.num_partitions(), 10);
        assert!(dp.partitions.iter().all(|p| p.end - p.start == 1));
        let whole = problem.random_partitioning(0, 1).unwrap();
        assert_eq!(whole.num_partitions(), 1);
        assert!(matches!(problem.random_partitioning(10, 1), Err(Error::NotEnoughLegalCuts { .. })));
    }

    #[test]
    fn residual_cuts_avoid_the_branch() {
        let dag = residual();
        let cuts = legal_cuts(&dag);
        assert_eq!(cuts, bridge_cuts(&dag));
        // order a b c d e f: the fork at b and join at e may not be split
        assert_eq!(cuts, vec![1, 5]);
    }

    #[test]
    fn moves_shift_one_layer() {
        let problem = Problem::new(chain(4), device(1e6), 4).unwrap();
        let dp = problem.evaluate(vec![2], problem.minimal_parallelism()).unwrap();
        let moved = problem.move_layer(&dp, 1, Direction::ToPrev).unwrap();
        assert_eq!(moved.cuts, vec![3]);
        let back = problem.move_layer(&dp, 0, Direction::ToNext).unwrap();
        assert_eq!(back.cuts, vec![1]);
        let single = problem.move_layer(&back, 0, Direction::ToNext);
        assert!(matches!(single, Err(Error::IllegalMove(_))));

        let problem = Problem::new(residual(), device(1e6), 4).unwrap();
        let dp = problem.evaluate(vec![1], problem.minimal_parallelism()).unwrap();
        assert!(matches!(problem.move_layer(&dp, 1, Direction::ToPrev), Err(Error::IllegalMove(_))));
    }

    #[test]
    fn bottleneck_tie_and_causes() {
        let problem = Problem::new(chain(4), device(1e6), 4).unwrap();
        let dp = problem.evaluate(vec![1, 2, 3], problem.minimal_parallelism()).unwrap();
        let b = problem.identify_bottleneck(&dp);
        assert_eq!(b.partition, 0);
        assert_eq!(b.cause, BottleneckCause::ResourceBound);

        let starved = Problem::new(chain(2), device(1.0), 4).unwrap();
        let dp = starved.evaluate(vec![], starved.minimal_parallelism()).unwrap();
        assert_eq!(starved.identify_bottleneck(&dp).cause, BottleneckCause::MemoryBound);

        let mut b = ModelBuilder::new("one");
        b.input_conv("c", TensorShape::new(2, 4, 4, 4), 2, [3, 3, 3], [1, 1, 1], [1, 1, 1], 1);
        let problem = Problem::new(b.build().unwrap(), device(1e6), 4).unwrap();
        let full = vec![max_parallelism(&problem.layers[0])];
        let dp = problem.evaluate(vec![], full).unwrap();
        assert_eq!(problem.identify_bottleneck(&dp).cause, BottleneckCause::ParallelismExhausted);
        let dp = problem.evaluate(vec![], problem.minimal_parallelism()).unwrap();
        assert_eq!(problem.identify_bottleneck(&dp).cause, BottleneckCause::ResourceBound);
    }

    #[test]
    fn reevaluation_reuses_untouched_partitions() {
        let problem = Problem::new(chain(4), device(1e6), 4).unwrap();
        let dp = problem.evaluate(vec![1, 3], problem.minimal_parallelism()).unwrap();
        let moved = problem.move_layer(&dp, 2, Direction::ToPrev);
        assert!(moved.is_err());
        let moved = problem.move_layer(&dp, 1, Direction::ToPrev).unwrap();
        assert!(Arc::ptr_eq(&moved.partitions[2], &dp.partitions[2]));
        let fresh = problem.evaluate(moved.cuts.clone(), moved.parallelism.clone()).unwrap();
        assert_eq!(fresh.t_total, moved.t_total);
    }
}
