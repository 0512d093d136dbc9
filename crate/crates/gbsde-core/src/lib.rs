//! Numerical laboratory for multi-dimensional backward stochastic
//! differential equations driven by G-Brownian motion.
//!
//! The probabilistic side solves the backward equations by dynamic
//! programming on a grid, one scalar equation per component inside a
//! Picard loop with frozen off-components; the PDE side discretizes the
//! associated system of fully nonlinear parabolic equations with a
//! monotone explicit scheme. A cross-validation harness compares the two.

pub mod crossval;
pub mod error;
pub mod expr;
pub mod forward;
pub mod grid;
pub mod lattice;
pub mod pde;
pub mod presets;
pub mod picard;
pub mod scalar;
pub mod sublinear;
pub mod util;

pub use error::{Error, Result};
pub use expr::{EvalContext, Expr, VarSpace};
pub use forward::{InitialState, PathBundle, ScenarioPolicy, SdeCoefficients};
pub use grid::{AxisSpec, GridSpec, SpatialGrid, TimeGrid, ValueField};
pub use sublinear::{GFunction, GammaKind, GammaSet, OneStepMeasure, QuadratureRule};
