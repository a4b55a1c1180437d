//! Simulated-annealing search over partition cuts and per-layer parallelism.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hw_blocks::{legal_streams_in, legal_streams_out, max_p_mac, streams_tied};
use crate::partitioner::{DesignPoint, Direction, Problem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Move {
    CoarseIn,
    CoarseOut,
    Fine,
    MoveLayer,
    AddCut,
    RemoveCut,
}

impl Move {
    pub const ALL: [Move; 6] = [Move::CoarseIn, Move::CoarseOut, Move::Fine, Move::MoveLayer, Move::AddCut, Move::RemoveCut];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoveWeights {
    pub coarse_in: f64,
    pub coarse_out: f64,
    pub fine: f64,
    pub move_layer: f64,
    pub add_cut: f64,
    pub remove_cut: f64,
}

impl Default for MoveWeights {
    fn default() -> Self {
        MoveWeights { coarse_in: 3.0, coarse_out: 3.0, fine: 3.0, move_layer: 1.0, add_cut: 0.5, remove_cut: 0.5 }
    }
}

impl MoveWeights {
    fn as_array(&self) -> [f64; 6] {
        [self.coarse_in, self.coarse_out, self.fine, self.move_layer, self.add_cut, self.remove_cut]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaConfig {
    /// Estimated from sampled neighbour objectives when absent.
    pub initial_temperature: Option<f64>,
    pub cooling_rate: f64,
    pub iterations_per_temperature: usize,
    /// Defaults to `initial_temperature * 1e-4`.
    pub min_temperature: Option<f64>,
    pub rng_seed: u64,
    pub batch: u64,
    pub initial_cuts: usize,
    pub weights: MoveWeights,
    /// Probability that a parallelism move targets the bottleneck partition.
    pub bottleneck_bias: f64,
    /// Score infeasible designs as `throughput / (1 + w * violation)` instead
    /// of minus infinity.
    pub penalty: Option<f64>,
    pub max_iterations: Option<usize>,
}

impl Default for SaConfig {
    fn default() -> Self {
        SaConfig {
            initial_temperature: None,
            cooling_rate: 0.97,
            iterations_per_temperature: 100,
            min_temperature: None,
            rng_seed: 0,
            batch: 100,
            initial_cuts: 0,
            weights: MoveWeights::default(),
            bottleneck_bias: 0.5,
            penalty: None,
            max_iterations: None,
        }
    }
}

impl SaConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SaConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.cooling_rate > 0.0 && self.cooling_rate < 1.0) {
            return bad("cooling_rate must lie in (0, 1)");
        }
        if self.iterations_per_temperature == 0 || self.batch == 0 {
            return bad("iterations_per_temperature and batch must be at least 1");
        }
        if matches!(self.initial_temperature, Some(t) if t.is_nan() || t <= 0.0) || matches!(self.min_temperature, Some(t) if t.is_nan() || t <= 0.0) {
            return bad("temperatures must be positive");
        }
        let w = self.weights.as_array();
        if w.iter().any(|&x| !x.is_finite() || x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return bad("move weights must be non-negative with a positive sum");
        }
        if !(0.0..=1.0).contains(&self.bottleneck_bias) {
            return bad("bottleneck_bias must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub temperature: f64,
    pub objective: f64,
    pub accepted: bool,
    pub best: f64,
}

#[derive(Clone, Debug)]
pub struct AnnealResult {
    /// Best feasible design, or the least-violating one if none was found.
    pub best: DesignPoint,
    pub best_objective: f64,
    pub feasible: bool,
    pub initial_temperature: f64,
    pub trace: Vec<TraceRow>,
}

impl AnnealResult {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,temperature,objective,accepted,best\n");
        for r in &self.trace {
            let _ = writeln!(
                out,
                "{},{:e},{},{},{}",
                r.iteration,
                r.temperature,
                fmt_objective(r.objective),
                r.accepted as u8,
                fmt_objective(r.best)
            );
        }
        out
    }
}

fn fmt_objective(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.9}")
    } else {
        "-inf".into()
    }
}

/// Throughput in GOps/s when every partition fits, otherwise minus infinity.
pub fn objective(dp: &DesignPoint) -> f64 {
    if dp.feasible {
        dp.throughput_gops
    } else {
        f64::NEG_INFINITY
    }
}

fn scored(dp: &DesignPoint, cfg: &SaConfig) -> f64 {
    match cfg.penalty {
        Some(w) if !dp.feasible => dp.throughput_gops / (1.0 + w * dp.violation),
        _ => objective(dp),
    }
}

const MOVE_RETRIES: usize = 16;

fn pick_move(weights: &[f64; 6], rng: &mut ChaCha8Rng) -> Move {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (m, &w) in Move::ALL.iter().zip(weights) {
        if x < w {
            return *m;
        }
        x -= w;
    }
    *Move::ALL.iter().zip(weights).rev().find(|(_, &w)| w > 0.0).unwrap().0
}

fn step(options: &[usize], current: usize, rng: &mut ChaCha8Rng) -> Option<usize> {
    let i = options.iter().position(|&v| v == current)?;
    let mut next = Vec::with_capacity(2);
    if i > 0 {
        next.push(options[i - 1]);
    }
    if i + 1 < options.len() {
        next.push(options[i + 1]);
    }
    (!next.is_empty()).then(|| next[rng.random_range(0..next.len())])
}

fn pick_layer(problem: &Problem, dp: &DesignPoint, cfg: &SaConfig, rng: &mut ChaCha8Rng) -> usize {
    if rng.random::<f64>() < cfg.bottleneck_bias {
        let p = &dp.partitions[problem.identify_bottleneck(dp).partition];
        rng.random_range(p.start..p.end)
    } else {
        rng.random_range(0..problem.len())
    }
}

fn try_move(problem: &Problem, dp: &DesignPoint, mv: Move, cfg: &SaConfig, rng: &mut ChaCha8Rng) -> Option<DesignPoint> {
    match mv {
        Move::CoarseIn | Move::CoarseOut | Move::Fine => {
            let i = pick_layer(problem, dp, cfg, rng);
            let layer = &problem.layers[i];
            let mut p = dp.parallelism[i];
            match mv {
                Move::CoarseIn => {
                    p.s_i = step(&legal_streams_in(layer), p.s_i, rng)?;
                    if streams_tied(layer) {
                        p.s_o = p.s_i;
                    }
                }
                Move::CoarseOut => {
                    if streams_tied(layer) {
                        return None;
                    }
                    p.s_o = step(&legal_streams_out(layer), p.s_o, rng)?;
                }
                _ => {
                    let range: Vec<usize> = (1..=max_p_mac(layer)).collect();
                    p.p_mac = step(&range, p.p_mac, rng)?;
                }
            }
            let mut par = dp.parallelism.clone();
            par[i] = p;
            problem.reevaluate(dp, dp.cuts.clone(), par).ok()
        }
        Move::MoveLayer => {
            if dp.num_partitions() < 2 {
                return None;
            }
            let idx = rng.random_range(0..dp.num_partitions());
            let dir = if rng.random::<bool>() { Direction::ToPrev } else { Direction::ToNext };
            problem.move_layer(dp, idx, dir).ok()
        }
        Move::AddCut => {
            let free: Vec<usize> = problem.legal_cuts().iter().copied().filter(|c| !dp.cuts.contains(c)).collect();
            if free.is_empty() {
                return None;
            }
            problem.add_cut(dp, free[rng.random_range(0..free.len())]).ok()
        }
        Move::RemoveCut => {
            if dp.cuts.is_empty() {
                return None;
            }
            problem.remove_cut(dp, rng.random_range(0..dp.cuts.len())).ok()
        }
    }
}

/// One weighted-random move; illegal draws are retried a bounded number of
/// times before falling back to the unchanged design.
pub fn neighbor(problem: &Problem, dp: &DesignPoint, cfg: &SaConfig, rng: &mut ChaCha8Rng) -> (Option<Move>, DesignPoint) {
    let weights = cfg.weights.as_array();
    for _ in 0..MOVE_RETRIES {
        let mv = pick_move(&weights, rng);
        if let Some(next) = try_move(problem, dp, mv, cfg, rng) {
            return (Some(mv), next);
        }
    }
    (None, dp.clone())
}

fn estimate_temperature(problem: &Problem, start: &DesignPoint, start_obj: f64, cfg: &SaConfig, rng: &mut ChaCha8Rng) -> f64 {
    let mut samples: Vec<f64> = vec![start_obj];
    for _ in 0..32 {
        let (_, n) = neighbor(problem, start, cfg, rng);
        samples.push(scored(&n, cfg));
    }
    let finite: Vec<f64> = samples.into_iter().filter(|x| x.is_finite()).collect();
    if finite.is_empty() {
        return 1.0;
    }
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    let var = finite.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / finite.len() as f64;
    let spread = var.sqrt();
    if spread > 0.0 {
        spread
    } else if mean.abs() > 0.0 {
        0.1 * mean.abs()
    } else {
        1.0
    }
}

fn better_fallback(a: &DesignPoint, b: &DesignPoint) -> bool {
    a.violation < b.violation || (a.violation == b.violation && a.throughput_gops > b.throughput_gops)
}

/// Classic simulated annealing. Deterministic for a given seed.
pub fn anneal(problem: &Problem, cfg: &SaConfig) -> Result<AnnealResult> {
    cfg.validate()?;
    if problem.batch != cfg.batch {
        return Err(Error::Config(format!("problem batch {} differs from search batch {}", problem.batch, cfg.batch)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut current = problem.random_partitioning(cfg.initial_cuts, rng.random())?;
    let mut current_obj = scored(&current, cfg);

    let t0 = match cfg.initial_temperature {
        Some(t) => t,
        None => estimate_temperature(problem, &current, current_obj, cfg, &mut rng),
    };
    let t_min = cfg.min_temperature.unwrap_or(t0 * 1e-4);

    let mut best: Option<(DesignPoint, f64)> = current.feasible.then(|| (current.clone(), objective(&current)));
    let mut fallback = current.clone();
    let mut trace = Vec::new();
    let mut temperature = t0;
    let mut iteration = 0;
    let budget = cfg.max_iterations.unwrap_or(usize::MAX);

    'outer: while temperature > t_min {
        for _ in 0..cfg.iterations_per_temperature {
            if iteration >= budget {
                break 'outer;
            }
            let (_, candidate) = neighbor(problem, &current, cfg, &mut rng);
            let obj = scored(&candidate, cfg);
            let accepted = if obj.is_finite() && current_obj.is_finite() {
                let delta = obj - current_obj;
                delta >= 0.0 || rng.random::<f64>() < (delta / temperature).exp()
            } else if obj.is_finite() {
                true
            } else if current_obj.is_finite() {
                false
            } else {
                candidate.violation <= current.violation
            };
            if accepted {
                current = candidate;
                current_obj = obj;
            }
            if current.feasible {
                let o = objective(&current);
                if best.as_ref().is_none_or(|(_, b)| o > *b) {
                    best = Some((current.clone(), o));
                }
            } else if best.is_none() && better_fallback(&current, &fallback) {
                fallback = current.clone();
            }
            trace.push(TraceRow {
                iteration,
                temperature,
                objective: obj,
                accepted,
                best: best.as_ref().map_or(f64::NEG_INFINITY, |(_, b)| *b),
            });
            iteration += 1;
        }
        temperature *= cfg.cooling_rate;
    }

    Ok(match best {
        Some((dp, obj)) => AnnealResult { best: dp, best_objective: obj, feasible: true, initial_temperature: t0, trace },
        None => {
            let result =
                AnnealResult { best: fallback, best_objective: f64::NEG_INFINITY, feasible: false, initial_temperature: t0, trace };
            return Err(Error::NoFeasibleDesign(Box::new(result)));
        }
    })
}
