//! Streaming dataflow accelerator modelling for 3D CNNs.
//!
//! A model description is parsed into a layer DAG ([`model_ir`]), each layer
//! is mapped to a parameterised hardware block ([`hw_blocks`]), partitions of
//! blocks become synchronous dataflow graphs ([`sdfg`]) whose matrices drive
//! the analytic performance model ([`perf_model`]) and the resource estimate
//! ([`resource_model`]). [`partitioner`] and [`dse`] search cuts and
//! parallelism for the best throughput; [`sim_oracle`] cross-checks the
//! analytic timing with a cycle-stepped simulation.

pub mod cli_report;
pub mod dse;
pub mod error;
pub mod hw_blocks;
pub mod model_ir;
pub mod partitioner;
pub mod perf_model;
pub mod rate;
pub mod resource_model;
pub mod sdfg;
pub mod sim_oracle;

pub use dse::{anneal, AnnealResult, SaConfig};
pub use error::{Error, Result};
pub use hw_blocks::{make_block, BlockConfig, Parallelism};
pub use model_ir::{model_workload, parse_model, LayerDescriptor, ModelDag, TensorShape};
pub use partitioner::{DesignPoint, Problem};
pub use perf_model::PerfReport;
pub use rate::Rate;
pub use resource_model::{DeviceSpec, ResourceUsage};
pub use sdfg::{build_sdfg, SdfGraph, SdfOptions};
