//! hp-adaptive interior-penalty discontinuous Galerkin solver for
//! incompressible, immiscible two-phase flow in heterogeneous, anisotropic
//! porous media.
//!
//! The crate is organised bottom-up:
//!
//! - [`mesh`]: adaptive nonconforming quadrilateral mesh (quadtree forest)
//! - [`quadrature`] / [`basis`]: Gauss rules and the modal Legendre tensor basis
//! - [`dgspace`]: variable-order DG spaces, projections and solution transfer
//! - [`physics`]: Brooks-Corey laws, the unified model framework, benchmark setups
//! - [`forms`]: residual/Jacobian assembly of the interior-penalty forms
//! - [`solver`]: block-sparse linear algebra, GMRES, Newton
//! - [`stepper`]: the five time-advancement strategies
//! - [`limiter`]: bound-preserving scaling limiter for the saturation
//! - [`adapt`]: residual error estimator and h/p marking strategies

pub mod adapt;
pub mod basis;
pub mod dgspace;
pub mod error;
pub mod forms;
pub mod limiter;
pub mod mesh;
pub mod physics;
pub mod quadrature;
pub mod solver;
pub mod stepper;

pub use error::CoreError;

/// Point in the physical domain, metres.
pub type Point = [f64; 2];
