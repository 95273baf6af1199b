//! Numerical toolkit for first-order differential constraints with variable
//! coefficients: spectral kernel projections, quasiconvex envelopes under a
//! differential constraint, homogenized densities via cell problems, and
//! two-scale / unfolding diagnostics.
//!
//! All fields live on uniform periodic grids over the unit cell; transforms
//! are discrete Fourier transforms, and every quadrature is the uniform
//! (midpoint) rule on the grid. Coordinates are reduced to `[0,1)` per axis
//! before any coefficient expression is evaluated, so user-supplied
//! coefficients are periodic by construction.

pub mod envelope;
pub mod error;
pub mod expr;
pub mod homogenize;
pub mod operator;
pub mod projection;
pub mod seed;
pub mod spectral;
pub mod twoscale;

pub use error::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
