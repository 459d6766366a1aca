//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("simplex {simplex} has non-positive orientation (signed volume {volume})")]
    NonPositiveOrientation { simplex: usize, volume: f64 },
    #[error("bounding box is degenerate along axis {axis}")]
    DegenerateBBox { axis: usize },
    #[error("mesh resolution must be positive, got {0}")]
    NonPositiveResolution(f64),
    #[error("mesh dimension must be 2 or 3, got {0}")]
    InvalidDimension(usize),
    #[error("simplex {simplex} references vertex {vertex} out of {n_vertices}")]
    VertexOutOfRange {
        simplex: usize,
        vertex: usize,
        n_vertices: usize,
    },
    #[error("simplex {simplex} repeats a vertex index")]
    DuplicateVertex { simplex: usize },
    #[error("expected {expected} positions, got {got}")]
    PositionCount { expected: usize, got: usize },
    #[error("vertex {0} has a non-finite coordinate")]
    NonFinitePosition(usize),
}

#[derive(Debug, Error)]
pub enum VarifoldError {
    #[error("simplex {0} has no usable data to define its feature law")]
    EmptySimplex(usize),
    #[error("point payload does not match the feature space: {0}")]
    PayloadMismatch(String),
    #[error("expected {expected} new positions, got {got}")]
    PositionCount { expected: usize, got: usize },
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("feature kernel and distribution kinds are incompatible: {0}")]
    KindMismatch(String),
    #[error("varifolds live on different feature spaces")]
    FeatureSpaceMismatch,
}

#[derive(Debug, Error)]
pub enum LddmmError {
    #[error("trajectory became non-finite at time step {step}")]
    NonFinite { step: usize },
    #[error("line search failed to find a decreasing step at iteration {iteration}")]
    LineSearchFailed { iteration: usize },
    #[error("control/state arrays have inconsistent shapes: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Error)]
pub enum AtlasError {
    #[error("constraint polytope is empty (violation {violation} after projection, simplices {constraints:?})")]
    Infeasible {
        violation: f64,
        constraints: Vec<usize>,
    },
    #[error("QP solver hit the iteration cap with KKT residual {residual}")]
    MaxIterations { residual: f64 },
    #[error("imputed density is zero on simplex {0}; feature law undefined")]
    ZeroDensity(usize),
    #[error("target features do not match the atlasing mode: {0}")]
    ModeMismatch(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Lddmm(#[from] LddmmError),
    #[error(transparent)]
    Varifold(#[from] VarifoldError),
}

#[derive(Debug, Error)]
pub enum PointProcessError {
    #[error("volume ratio must be positive, got chi1={chi1}, chi2={chi2}")]
    InvalidRatio { chi1: f64, chi2: f64 },
    #[error("region {0} folded under the deformation (non-positive volume)")]
    FoldedRegion(usize),
    #[error("model arrays have inconsistent lengths: {0}")]
    ShapeMismatch(String),
    #[error("feature partition incompatible with realization payloads: {0}")]
    PartitionMismatch(String),
}

#[derive(Debug, Error)]
pub enum FileError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("input contains no records")]
    EmptyInput,
    #[error("unsupported header layout: {0}")]
    BadHeader(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Varifold(#[from] VarifoldError),
}
