//! Numerical laboratory for homogenization of advection-diffusion equations
//! with divergence-free random drifts on periodized space-time environments.

pub mod environment;
pub mod grid;
pub mod linalg;
pub mod rng;
pub mod spectral;
pub mod krylov;
pub mod stream_solver;
pub mod corrector;
pub mod path_clt;
pub mod pde_solver;
pub mod experiment;
pub mod container;

/// Crate version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
