//! Batch driver for the two-phase flow DG solver.
//!
//! A run is fully described by a flat key=value config file (plus optional
//! command-line overrides): problem preset, model formulation, time stepping
//! scheme, adaptivity parameters and output cadence. The driver executes the
//! time loop (step, limit, estimate, adapt, transfer, output) and emits VTK
//! snapshots, line samples over the diagnostic line, a per-step diagnostics
//! CSV and a run summary.

pub mod config;
pub mod driver;
pub mod sample;
pub mod vtk;

pub use config::RunConfig;
pub use driver::{run, RunResult, StepRecord};
