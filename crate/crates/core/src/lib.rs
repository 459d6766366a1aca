//! Registration engine for measure-valued image data supported on simplicial
//! meshes: kernel metrics between mesh varifolds, geodesic diffeomorphic
//! matching driven by an adjoint-state gradient, cross-scale atlas parameter
//! estimation by quadratic programming, and compound-Poisson hypothesis
//! tests on registered point sets.

pub mod atlas;
pub mod error;
pub mod geom;
pub mod kernels;
pub mod lddmm;
pub mod mesh;
mod scalar;
pub mod varifold;

pub use error::{KernelError, MeshError, VarifoldError};
pub use geom::Point;
pub use scalar::Scalar;

/// Concrete aliases for the common double-precision instantiation.
pub type Point64 = Point<f64>;
pub type SimplicialFamily64 = mesh::SimplicialFamily<f64>;
pub type MeshVarifold64 = varifold::MeshVarifold<f64>;
pub type KernelMetric64 = kernels::KernelMetric<f64>;
