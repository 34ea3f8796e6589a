//! Geometric metrics, analytic cost accounting and the decode throughput
//! harness.

mod bench;
mod cost;
mod metrics;

use thiserror::Error;

use crate::engine::EngineError;
use crate::mesh::MeshError;
use crate::model::ModelError;

pub use bench::{median, throughput_bench, BenchEntry, BenchReport, MIN_WARMUP};
pub use cost::{
    baseline_activation_elems, crossover, decoder_score_ratio, flops_account, instrumented_lane_flops,
    lane_activation_elems, pathway_batch_flops, sweep, sweep_csv, Baseline, CostMode, CostReport, FlopBreakdown,
    SweepRow,
};
pub use metrics::{
    chamfer, closest_point_on_triangle, evaluate_meshes, mesh_chamfer, normal_consistency, one_sided,
    point_mesh_distance, point_to_mesh, point_triangle_distance, MetricReport, NormalConsistency,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("mesh has no interior edges")]
    NoInteriorEdges,
    #[error(transparent)]
    Mesh(MeshError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("token mismatch between runs at position {position}; refusing to report a speedup")]
    Mismatch { position: usize },
    #[error("{0}")]
    Invalid(String),
}

impl From<crate::tensor::TensorError> for EvalError {
    fn from(e: crate::tensor::TensorError) -> Self {
        EvalError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;
