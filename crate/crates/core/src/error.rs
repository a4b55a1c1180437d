use thiserror::Error;

use crate::dse::AnnealResult;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("shape mismatch at layer `{layer}`: {detail}")]
    ShapeMismatch { layer: String, detail: String },

    #[error("model graph contains a cycle through `{0}`")]
    Cycle(String),

    #[error("arc references unknown layer `{missing}` (from `{from}`)")]
    DanglingArc { from: String, missing: String },

    #[error("illegal parallelism for layer `{layer}`: {detail}")]
    IllegalParallelism { layer: String, detail: String },

    #[error("partition graph is disconnected ({components} components)")]
    DisconnectedGraph { components: usize },

    #[error("stream mismatch on arc {producer} -> {consumer}: {produced} vs {consumed} streams")]
    StreamMismatch {
        producer: String,
        consumer: String,
        produced: usize,
        consumed: usize,
    },

    #[error("branch forked at `{fork}` leaves the partition without reconverging")]
    NonReconvergentBranch { fork: String },

    #[error("arc {arc} carries workload but node `{node}` has a zero rate")]
    DivisionByZeroRate { arc: usize, node: String },

    #[error("requested {requested} cuts but only {available} legal cut positions exist")]
    NotEnoughLegalCuts { requested: usize, available: usize },

    #[error("illegal move: {0}")]
    IllegalMove(String),

    #[error("no feasible design found")]
    NoFeasibleDesign(Box<AnnealResult>),

    #[error("simulation deadlocked at cycle {cycle} with tokens outstanding")]
    DeadlockDetected { cycle: u64 },

    #[error("simulation exceeded its budget of {0} cycles")]
    SimulationBudget(u64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
