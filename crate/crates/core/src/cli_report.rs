//! Command-line front end and the JSON/CSV report formats.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dse::{anneal, AnnealResult, SaConfig};
use crate::error::{Error, Result};
use crate::hw_blocks::Parallelism;
use crate::model_ir::{parse_model, LayerKind};
use crate::partitioner::{BottleneckCause, DesignPoint, Problem};
use crate::rate::Rate;
use crate::resource_model::{feasible_with, DeviceSpec, ResourceUsage, Utilization};
use crate::sdfg::{SdfGraph, SdfOptions};
use crate::sim_oracle::{geometric_mean, validate_suite, StructureClass, Validation};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
pub struct BlockReport {
    pub layer: String,
    pub kind: LayerKind,
    pub s_i: usize,
    pub s_o: usize,
    pub p_mac: usize,
    pub r_in: Vec<Rate>,
    pub r_out: Rate,
    pub depth: u64,
}

#[derive(Serialize)]
pub struct PartitionReport {
    pub index: usize,
    pub first_layer: String,
    pub last_layer: String,
    pub layers: usize,
    pub ii_max: f64,
    pub depth: u64,
    pub t_batch_s: f64,
    pub workload_gops: f64,
    pub resources: ResourceUsage,
    pub utilization: Utilization,
    pub feasible: bool,
    pub blocks: Vec<BlockReport>,
}

#[derive(Serialize)]
pub struct SearchReport {
    pub seed: u64,
    pub iterations: usize,
    pub initial_temperature: f64,
    pub best_objective: Option<f64>,
}

#[derive(Serialize)]
pub struct Report {
    pub schema: u32,
    pub model: String,
    pub device: String,
    pub batch: u64,
    pub feasible: bool,
    pub workload_gops: f64,
    pub clips_per_s: f64,
    pub gops_per_s: f64,
    /// GOps/s divided by the DSP count averaged over partitions.
    pub gops_per_s_per_dsp: f64,
    pub op_per_dsp_per_cycle: f64,
    pub dsp_mean: f64,
    pub dsp_utilization_mean: f64,
    pub dsp_utilization_max: f64,
    pub bram_utilization_mean: f64,
    pub bram_utilization_max: f64,
    /// Which of the mean/max utilisation figures is the headline DSP%.
    pub utilization_compared: &'static str,
    pub total_time_s: f64,
    pub t_reconfig_s: f64,
    pub bottleneck_partition: usize,
    pub bottleneck_cause: BottleneckCause,
    pub partitions: Vec<PartitionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchReport>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn max(xs: impl Iterator<Item = f64>) -> f64 {
    xs.fold(0.0, f64::max)
}

pub fn build_report(problem: &Problem, dp: &DesignPoint, search: Option<SearchReport>) -> Report {
    let device = &problem.device;
    let partitions: Vec<PartitionReport> = dp
        .partitions
        .iter()
        .enumerate()
        .map(|(index, p)| PartitionReport {
            index,
            first_layer: problem.layers[p.start].id.clone(),
            last_layer: problem.layers[p.end - 1].id.clone(),
            layers: p.end - p.start,
            ii_max: p.perf.ii_max,
            depth: p.perf.depth,
            t_batch_s: p.perf.t_batch,
            workload_gops: p.perf.workload_gops,
            resources: p.resources,
            utilization: p.resources.utilization(device),
            feasible: p.feasible,
            blocks: p
                .graph
                .blocks()
                .map(|b| BlockReport {
                    layer: b.layer.id.clone(),
                    kind: b.layer.kind(),
                    s_i: b.s_i,
                    s_o: b.s_o,
                    p_mac: b.p_mac,
                    r_in: b.rates.r_in.clone(),
                    r_out: b.rates.r_out,
                    depth: b.depth,
                })
                .collect(),
        })
        .collect();
    let dsp_mean = mean(partitions.iter().map(|p| p.resources.dsp as f64));
    let gops_per_s_per_dsp = if dsp_mean > 0.0 { dp.throughput_gops / dsp_mean } else { 0.0 };
    let bottleneck = problem.identify_bottleneck(dp);
    Report {
        schema: SCHEMA_VERSION,
        model: problem.dag.name.clone(),
        device: device.name.clone(),
        batch: dp.batch,
        feasible: dp.feasible,
        workload_gops: problem.workload_gops(),
        clips_per_s: dp.clips_per_s,
        gops_per_s: dp.throughput_gops,
        gops_per_s_per_dsp,
        op_per_dsp_per_cycle: gops_per_s_per_dsp / (device.clock_hz / 1e9),
        dsp_mean,
        dsp_utilization_mean: mean(partitions.iter().map(|p| p.utilization.dsp)),
        dsp_utilization_max: max(partitions.iter().map(|p| p.utilization.dsp)),
        bram_utilization_mean: mean(partitions.iter().map(|p| p.utilization.bram18)),
        bram_utilization_max: max(partitions.iter().map(|p| p.utilization.bram18)),
        utilization_compared: "mean",
        total_time_s: dp.t_total,
        t_reconfig_s: device.t_reconfig,
        bottleneck_partition: bottleneck.partition,
        bottleneck_cause: bottleneck.cause,
        partitions,
        search,
    }
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialisation cannot fail") + "\n"
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub id: String,
    pub s_i: usize,
    pub s_o: usize,
    #[serde(default = "one")]
    pub p_mac: usize,
}

fn one() -> usize {
    1
}

/// A fixed design: the layers that start a new partition, and parallelism
/// per layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignFile {
    pub schema: u32,
    pub model: String,
    pub batch: u64,
    pub cuts: Vec<String>,
    pub layers: Vec<LayerConfig>,
}

impl DesignFile {
    pub fn from_design(problem: &Problem, dp: &DesignPoint) -> Self {
        DesignFile {
            schema: SCHEMA_VERSION,
            model: problem.dag.name.clone(),
            batch: dp.batch,
            cuts: dp.cuts.iter().map(|&c| problem.layers[c].id.clone()).collect(),
            layers: problem
                .layers
                .iter()
                .zip(&dp.parallelism)
                .map(|(l, p)| LayerConfig { id: l.id.clone(), s_i: p.s_i, s_o: p.s_o, p_mac: p.p_mac })
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: DesignFile = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        if d.schema != SCHEMA_VERSION {
            return Err(Error::Schema(format!("unsupported design schema {}", d.schema)));
        }
        Ok(d)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("design serialisation cannot fail") + "\n"
    }

    /// Cut positions and topologically ordered parallelism for `problem`.
    pub fn resolve(&self, problem: &Problem) -> Result<(Vec<usize>, Vec<Parallelism>)> {
        let position = |id: &str| {
            problem
                .layers
                .iter()
                .position(|l| l.id == id)
                .ok_or_else(|| Error::Schema(format!("design names unknown layer `{id}`")))
        };
        let mut cuts = self.cuts.iter().map(|c| position(c)).collect::<Result<Vec<_>>>()?;
        cuts.sort_unstable();
        let mut par: Vec<Option<Parallelism>> = vec![None; problem.len()];
        for l in &self.layers {
            let i = position(&l.id)?;
            par[i] = Some(Parallelism::new(l.s_i, l.s_o, l.p_mac));
        }
        let par = par
            .into_iter()
            .enumerate()
            .map(|(i, p)| p.ok_or_else(|| Error::Schema(format!("design has no entry for layer `{}`", problem.layers[i].id))))
            .collect::<Result<Vec<_>>>()?;
        Ok((cuts, par))
    }
}

/// `(file name, CSV)` for the S, R and Gamma matrices of one graph.
pub fn matrix_dumps(graph: &SdfGraph, prefix: &str) -> Vec<(String, String)> {
    vec![
        (format!("{prefix}S.csv"), graph.matrix_csv(&graph.s)),
        (format!("{prefix}R.csv"), graph.matrix_csv(&graph.r)),
        (format!("{prefix}Gamma.csv"), graph.matrix_csv(&graph.gamma)),
    ]
}

pub fn validation_table(rows: &[(String, Validation)]) -> String {
    let mut out = format!("{:<16} {:>14} {:>14} {:>9}\n", "graph", "analytic", "simulated", "error");
    for (name, v) in rows {
        out += &format!("{:<16} {:>14.1} {:>14} {:>8.3}%\n", name, v.analytic_cycles, v.simulated_cycles, 100.0 * v.error);
    }
    let errors: Vec<f64> = rows.iter().map(|(_, v)| v.error).collect();
    out += &format!("{:<16} {:>14} {:>14} {:>8.3}%\n", "geomean", "", "", 100.0 * geometric_mean(&errors));
    out
}

// ---------------------------------------------------------------------------
// Command line

#[derive(Parser, Debug)]
#[command(name = "voxflow", version, about = "Map 3D CNNs onto streaming FPGA dataflow designs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Search partitioning and parallelism for the best throughput.
    Optimize(OptimizeArgs),
    /// Report a fixed design without searching.
    Evaluate(EvaluateArgs),
    /// Compare the analytic timing with the cycle simulator.
    Validate(ValidateArgs),
    /// Write the S, R and Gamma matrices of every partition as CSV.
    DumpSdfg(DumpArgs),
}

#[derive(Args, Debug)]
pub struct Common {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub device: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub strict_streams: bool,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub batch: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub initial_cuts: Option<usize>,
    #[arg(long)]
    pub sa_config: Option<PathBuf>,
    #[arg(long)]
    pub dump_matrices: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub design: PathBuf,
    #[arg(long)]
    pub batch: Option<u64>,
    #[arg(long)]
    pub dump_matrices: bool,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[arg(long, default_value_t = 100)]
    pub batch: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub design: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub batch: u64,
}

/// Process exit status of a command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    NoFeasibleDesign,
}

impl Outcome {
    pub fn code(self) -> u8 {
        match self {
            Outcome::Ok => 0,
            Outcome::NoFeasibleDesign => 2,
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn problem(common: &Common, batch: u64) -> Result<Problem> {
    let dag = parse_model(&read(&common.model)?)?;
    let device = DeviceSpec::from_json(&read(&common.device)?)?;
    Problem::new(dag, device, batch)?
        .with_options(SdfOptions { strict_streams: common.strict_streams })
        .with_jobs(common.jobs)
}

fn out_dir(out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_matrices(dir: &Path, dp: &DesignPoint) -> Result<()> {
    for (i, p) in dp.partitions.iter().enumerate() {
        for (name, csv) in matrix_dumps(&p.graph, &format!("partition{i}_")) {
            fs::write(dir.join(name), csv)?;
        }
    }
    Ok(())
}

fn summary(report: &Report) -> String {
    format!(
        "{} on {}: {:.3} clips/s, {:.3} GOps/s, {} partition(s), feasible: {}",
        report.model,
        report.device,
        report.clips_per_s,
        report.gops_per_s,
        report.partitions.len(),
        report.feasible
    )
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Optimize(args) => optimize(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Validate(args) => validate_cmd(args),
        Command::DumpSdfg(args) => dump(args),
    }
}

fn optimize(args: OptimizeArgs) -> Result<Outcome> {
    let mut cfg = match &args.sa_config {
        Some(p) => SaConfig::from_json(&read(p)?)?,
        None => SaConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.rng_seed = s;
    }
    if let Some(b) = args.batch {
        cfg.batch = b;
    }
    if let Some(l) = args.initial_cuts {
        cfg.initial_cuts = l;
    }
    cfg.validate()?;
    let problem = problem(&args.common, cfg.batch)?;
    let (result, outcome) = match anneal(&problem, &cfg) {
        Ok(r) => (r, Outcome::Ok),
        Err(Error::NoFeasibleDesign(r)) => (*r, Outcome::NoFeasibleDesign),
        Err(e) => return Err(e),
    };
    let dir = out_dir(&args.common.out)?;
    let report = optimize_report(&problem, &result, cfg.rng_seed);
    fs::write(dir.join("report.json"), report.to_json())?;
    fs::write(dir.join("design.json"), DesignFile::from_design(&problem, &result.best).to_json())?;
    fs::write(dir.join("trace.csv"), result.trace_csv())?;
    if args.dump_matrices {
        write_matrices(&dir, &result.best)?;
    }
    println!("{}", summary(&report));
    if outcome == Outcome::NoFeasibleDesign {
        eprintln!("no feasible design found; report holds the least-violating design");
    }
    Ok(outcome)
}

/// Report of a search result, with the feasibility of every partition
/// re-checked against the device budget.
pub fn optimize_report(problem: &Problem, result: &AnnealResult, seed: u64) -> Report {
    let constraints = problem.estimator.constraints();
    debug_assert!(
        !result.feasible || result.best.partitions.iter().all(|p| feasible_with(&p.resources, &problem.device, constraints))
    );
    let search = SearchReport {
        seed,
        iterations: result.trace.len(),
        initial_temperature: result.initial_temperature,
        best_objective: result.feasible.then_some(result.best_objective),
    };
    build_report(problem, &result.best, Some(search))
}

fn evaluate(args: EvaluateArgs) -> Result<Outcome> {
    let design = DesignFile::from_json(&read(&args.design)?)?;
    let problem = problem(&args.common, args.batch.unwrap_or(design.batch))?;
    let (cuts, par) = design.resolve(&problem)?;
    let dp = problem.evaluate(cuts, par)?;
    let dir = out_dir(&args.common.out)?;
    let report = build_report(&problem, &dp, None);
    fs::write(dir.join("report.json"), report.to_json())?;
    if args.dump_matrices {
        write_matrices(&dir, &dp)?;
    }
    println!("{}", summary(&report));
    Ok(Outcome::Ok)
}

fn validate_cmd(args: ValidateArgs) -> Result<Outcome> {
    let rows: Vec<(String, Validation)> =
        validate_suite(args.batch)?.into_iter().map(|(c, v): (StructureClass, Validation)| (c.to_string(), v)).collect();
    let table = validation_table(&rows);
    print!("{table}");
    if args.out.is_some() {
        let dir = out_dir(&args.out)?;
        let errors: Vec<f64> = rows.iter().map(|(_, v)| v.error).collect();
        let json = serde_json::json!({
            "schema": SCHEMA_VERSION,
            "batch": args.batch,
            "graphs": rows.iter().map(|(n, v)| serde_json::json!({"class": n, "result": v})).collect::<Vec<_>>(),
            "geomean_error": geometric_mean(&errors),
        });
        fs::write(dir.join("validation.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    }
    Ok(Outcome::Ok)
}

fn dump(args: DumpArgs) -> Result<Outcome> {
    let design = args.design.as_ref().map(|p| read(p).and_then(|t| DesignFile::from_json(&t))).transpose()?;
    let problem = problem(&args.common, design.as_ref().map_or(args.batch, |d| d.batch))?;
    let dp = match &design {
        Some(d) => {
            let (cuts, par) = d.resolve(&problem)?;
            problem.evaluate(cuts, par)?
        }
        None => problem.evaluate(vec![], problem.minimal_parallelism())?,
    };
    match &args.common.out {
        Some(_) => write_matrices(&out_dir(&args.common.out)?, &dp)?,
        None => {
            for (i, p) in dp.partitions.iter().enumerate() {
                for (name, csv) in matrix_dumps(&p.graph, &format!("partition{i}_")) {
                    println!("# {name}\n{csv}");
                }
            }
        }
    }
    Ok(Outcome::Ok)
}
