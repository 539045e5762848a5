//! Semi-discrete velocity-space model of the nonlinear Boltzmann equation
//! on a truncated-octahedron lattice.
//!
//! Velocity space is partitioned into space-filling truncated octahedra
//! whose centers form a BCC lattice. Collision physics is precomputed into
//! a sparse gain tensor and a loss matrix by numerical quadrature; the
//! remaining dynamics is a closed quadratic system for the per-cell
//! densities, with momentum and energy transported passively in 1-D slab
//! geometry. Discrete mass conservation holds to roundoff by construction
//! after the conservation correction pass.

pub mod cache;
pub mod coefficients;
pub mod config;
pub mod diagnostics;
pub mod gauss;
pub mod kernel;
pub mod lattice;
pub mod solver;
pub mod symmetry;

pub use cache::{load_coefficients, save_coefficients};
pub use coefficients::{build_coefficients, BuildParams, CoefficientSet};
pub use kernel::{gain_kernel, gain_kernel_indicator, KernelModel, SphereQuadrature};
pub use lattice::{CellGeometry, CellIndex, CellRule, Located, VelocityLattice};
pub use solver::{
    collision_rhs, initialize_from_maxwellian, step_1d, step_homogeneous, Grid1D, Integrator,
    KineticState,
};
