//! Iterative computation of slow manifolds, fiber tangent frames and fiber
//! curvature for analytic slow-fast ODE systems, plus the fiber projections
//! and trajectory-comparison experiments built on top of them.
//!
//! The pipeline is: solve the critical graph, refine it by the invariance
//! equation (`manifold`), remove the linear fast dependence of the slow
//! field (`fibers`), remove the quadratic dependence (`curvature`), then
//! project points along the computed fibers (`projection`) and measure
//! convergence orders against integrated trajectories (`dynamics`).
//!
//! All numerics are generic over the scalar type through [`Real`];
//! concrete `f64` aliases are exported at the crate root.

pub mod curvature;
pub mod dynamics;
pub mod error;
pub mod fibers;
pub mod grid;
pub mod manifold;
pub mod ode;
pub mod projection;
pub mod real;
pub mod report;
pub mod system;
pub mod systems;

pub use error::{Result, SlowFastError, Warning};
pub use real::Real;

/// `f64` grid specification.
pub type GridSpec64 = grid::GridSpec<f64>;
/// `f64` scalar-valued grid.
pub type ScalarGrid64 = grid::GridFunction<f64, f64>;
/// `f64` vector-valued grid.
pub type VectorGrid64 = grid::GridFunction<f64, nalgebra::DVector<f64>>;
/// `f64` matrix-valued grid.
pub type MatrixGrid64 = grid::GridFunction<f64, nalgebra::DMatrix<f64>>;
/// `f64` slow-fast system.
pub type System64 = system::SlowFastSystem<f64>;

