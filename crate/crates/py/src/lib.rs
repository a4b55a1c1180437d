//! Python bindings for voxflow.

use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use voxflow::cli_report::{build_report, optimize_report, DesignFile};
use voxflow::sdfg::SdfOptions;
use voxflow::sim_oracle::{geometric_mean, validate_suite as run_suite};
use voxflow::{anneal, DesignPoint, DeviceSpec, Error, ModelDag, SaConfig};

create_exception!(voxflow, VoxflowError, PyException);

fn err(e: Error) -> PyErr {
    VoxflowError::new_err(e.to_string())
}

fn read(path: &str) -> PyResult<String> {
    std::fs::read_to_string(path).map_err(|e| err(e.into()))
}

/// A parsed model DAG.
#[pyclass(name = "Model", frozen)]
struct PyModel(ModelDag);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        voxflow::parse_model(text).map(PyModel).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Self::from_json(&read(path)?)
    }

    #[getter]
    fn name(&self) -> &str {
        &self.0.name
    }

    /// Layer ids in topological order.
    #[getter]
    fn layers(&self) -> Vec<String> {
        self.0.order().to_vec()
    }

    /// Operations per clip, in giga-operations.
    #[getter]
    fn workload_gops(&self) -> f64 {
        voxflow::model_workload(&self.0)
    }

    fn to_json(&self) -> String {
        voxflow::model_ir::serialize_model(&self.0)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Model({:?}, {} layers)", self.0.name, self.0.len())
    }
}

/// An FPGA device budget.
#[pyclass(name = "Device", frozen)]
struct PyDevice(DeviceSpec);

#[pymethods]
impl PyDevice {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        DeviceSpec::from_json(text).map(PyDevice).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Self::from_json(&read(path)?)
    }

    #[getter]
    fn name(&self) -> &str {
        &self.0.name
    }

    #[getter]
    fn dsp(&self) -> u64 {
        self.0.dsp_total
    }

    #[getter]
    fn bram18(&self) -> u64 {
        self.0.bram18_total
    }

    #[getter]
    fn clock_hz(&self) -> f64 {
        self.0.clock_hz
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    fn __repr__(&self) -> String {
        format!("Device({:?}, dsp={}, bram18={})", self.0.name, self.0.dsp_total, self.0.bram18_total)
    }
}

/// One model on one device at a fixed batch size.
#[pyclass(name = "Problem", frozen)]
struct PyProblem(Arc<voxflow::Problem>);

#[pymethods]
impl PyProblem {
    #[new]
    #[pyo3(signature = (model, device, batch = 100, strict_streams = false, jobs = 1))]
    fn new(model: &PyModel, device: &PyDevice, batch: u64, strict_streams: bool, jobs: usize) -> PyResult<Self> {
        let problem = voxflow::Problem::new(model.0.clone(), device.0.clone(), batch)
            .map_err(err)?
            .with_options(SdfOptions { strict_streams })
            .with_jobs(jobs)
            .map_err(err)?;
        Ok(PyProblem(Arc::new(problem)))
    }

    #[getter]
    fn batch(&self) -> u64 {
        self.0.batch
    }

    /// Layer ids after which a partition may end.
    #[getter]
    fn legal_cuts(&self) -> Vec<String> {
        self.0.legal_cuts().iter().map(|&c| self.0.layers[c].id.clone()).collect()
    }

    /// Single partition with every layer at its smallest parallelism.
    fn minimal_design(&self) -> PyResult<PyDesign> {
        let dp = self.0.evaluate(Vec::new(), self.0.minimal_parallelism()).map_err(err)?;
        Ok(self.design(dp, None))
    }

    /// Evaluates a design file given as JSON text.
    fn evaluate(&self, design_json: &str) -> PyResult<PyDesign> {
        let design = DesignFile::from_json(design_json).map_err(err)?;
        let (cuts, par) = design.resolve(&self.0).map_err(err)?;
        let dp = self.0.evaluate(cuts, par).map_err(err)?;
        Ok(self.design(dp, None))
    }

    /// Simulated annealing over cuts and parallelism. Returns the least
    /// violating design with `feasible == False` when nothing fits.
    #[pyo3(signature = (config_json = None, seed = None, max_iterations = None))]
    fn anneal(&self, py: Python<'_>, config_json: Option<&str>, seed: Option<u64>, max_iterations: Option<usize>) -> PyResult<PyDesign> {
        let mut cfg = match config_json {
            Some(text) => SaConfig::from_json(text).map_err(err)?,
            None => SaConfig::default(),
        };
        if let Some(s) = seed {
            cfg.rng_seed = s;
        }
        if max_iterations.is_some() {
            cfg.max_iterations = max_iterations;
        }
        cfg.batch = self.0.batch;
        cfg.validate().map_err(err)?;
        let problem = Arc::clone(&self.0);
        let result = match py.detach(|| anneal(&problem, &cfg)) {
            Ok(r) => r,
            Err(Error::NoFeasibleDesign(r)) => *r,
            Err(e) => return Err(err(e)),
        };
        let report = optimize_report(&self.0, &result, cfg.rng_seed).to_json();
        let trace = result.trace_csv();
        Ok(PyDesign { problem: Arc::clone(&self.0), point: result.best, report: Some(report), trace: Some(trace) })
    }
}

impl PyProblem {
    fn design(&self, point: DesignPoint, report: Option<String>) -> PyDesign {
        PyDesign { problem: Arc::clone(&self.0), point, report, trace: None }
    }
}

/// An evaluated design.
#[pyclass(name = "Design", frozen)]
struct PyDesign {
    problem: Arc<voxflow::Problem>,
    point: DesignPoint,
    report: Option<String>,
    trace: Option<String>,
}

#[pymethods]
impl PyDesign {
    #[getter]
    fn throughput_gops(&self) -> f64 {
        self.point.throughput_gops
    }

    #[getter]
    fn clips_per_s(&self) -> f64 {
        self.point.clips_per_s
    }

    #[getter]
    fn total_time_s(&self) -> f64 {
        self.point.t_total
    }

    #[getter]
    fn feasible(&self) -> bool {
        self.point.feasible
    }

    #[getter]
    fn num_partitions(&self) -> usize {
        self.point.num_partitions()
    }

    /// Per partition: layer count, II_max, depth and resource usage.
    fn partitions<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.point
            .partitions
            .iter()
            .map(|p| {
                let d = PyDict::new(py);
                d.set_item("first_layer", &self.problem.layers[p.start].id)?;
                d.set_item("last_layer", &self.problem.layers[p.end - 1].id)?;
                d.set_item("layers", p.end - p.start)?;
                d.set_item("ii_max", p.perf.ii_max)?;
                d.set_item("depth", p.perf.depth)?;
                d.set_item("dsp", p.resources.dsp)?;
                d.set_item("bram18", p.resources.bram18)?;
                d.set_item("feasible", p.feasible)?;
                Ok(d)
            })
            .collect()
    }

    /// The report as pretty-printed JSON.
    fn report_json(&self) -> String {
        match &self.report {
            Some(r) => r.clone(),
            None => build_report(&self.problem, &self.point, None).to_json(),
        }
    }

    /// The design file as JSON, accepted by `Problem.evaluate`.
    fn design_json(&self) -> String {
        DesignFile::from_design(&self.problem, &self.point).to_json()
    }

    /// Annealing trace as CSV, if this design came from a search.
    fn trace_csv(&self) -> Option<String> {
        self.trace.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Design({:.3} GOp/s, {} partitions, feasible={})",
            self.point.throughput_gops,
            self.point.num_partitions(),
            if self.point.feasible { "True" } else { "False" }
        )
    }
}

/// Analytic vs simulated batch time for the bundled graphs, one dict per
/// graph, plus the geometric mean error.
#[pyfunction]
#[pyo3(signature = (batch = 100))]
fn validate_suite<'py>(py: Python<'py>, batch: u64) -> PyResult<(Vec<Bound<'py, PyDict>>, f64)> {
    let rows = py.detach(|| run_suite(batch)).map_err(err)?;
    let errors: Vec<f64> = rows.iter().map(|(_, v)| v.error).collect();
    let dicts = rows
        .iter()
        .map(|(class, v)| {
            let d = PyDict::new(py);
            d.set_item("class", class.to_string())?;
            d.set_item("analytic_cycles", v.analytic_cycles)?;
            d.set_item("simulated_cycles", v.simulated_cycles)?;
            d.set_item("error", v.error)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((dicts, geometric_mean(&errors)))
}

#[pymodule(name = "voxflow")]
fn voxflow_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("VoxflowError", m.py().get_type::<VoxflowError>())?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyDevice>()?;
    m.add_class::<PyProblem>()?;
    m.add_class::<PyDesign>()?;
    m.add_function(wrap_pyfunction!(validate_suite, m)?)?;
    Ok(())
}
