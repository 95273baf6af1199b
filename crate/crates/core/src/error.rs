use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },

    #[error("unbound variable `{name}`")]
    UnboundVariable { name: String },

    #[error("division by zero")]
    DivisionByZero,

    #[error("expression is not differentiable in xi: {location}")]
    NonDifferentiable { location: String },

    #[error("invalid grid dims {dims:?}: need 1..=3 axes, all even and >= 4")]
    InvalidGrid { dims: Vec<usize> },

    #[error("fields have mismatched shape: {context}")]
    ShapeMismatch { context: String },

    #[error("spectrum is not conjugate-symmetric: imaginary residue {imag_ratio:.3e} of field norm")]
    NonSymmetricSpectrum { imag_ratio: f64 },

    #[error("lp exponent must lie in (1, inf), got {p}")]
    InvalidExponent { p: f64 },

    #[error("the symbol is undefined at the zero frequency")]
    ZeroFrequency,

    #[error(
        "constant-rank condition violated at x={x:?}, lambda={lambda:?}: rank {observed} != reference {reference}"
    )]
    ConstantRankViolation {
        x: Vec<f64>,
        lambda: Vec<f64>,
        observed: usize,
        reference: usize,
    },

    #[error(
        "numerical rank drifted at x={x:?}, lambda={lambda:?}: rank {observed} != reference {reference}"
    )]
    RankDeficiencyDrift {
        x: Vec<f64>,
        lambda: Vec<f64>,
        observed: usize,
        reference: usize,
    },

    #[error("Armijo search failed on the first iteration (non-finite gradient or objective)")]
    NoDescent,

    #[error("oscillation scale {n} does not divide the micro grid {dims:?}")]
    GridIncompatible { n: usize, dims: Vec<usize> },

    #[error("1/epsilon = {eps_inv} does not divide the macro grid {dims:?}")]
    IncompatibleEpsilon { eps_inv: usize, dims: Vec<usize> },

    #[error("field is not an admissible two-scale limit: {residuals}")]
    NotAFreeField { residuals: String },

    #[error("conjugate box too small: argmax hit the boundary on axis {axis} at dual point {dual:.6}")]
    BoxTooSmall { axis: usize, dual: f64 },

    #[error("macro field is not constraint-free: residual {residual:.3e} > tol {tol:.3e}")]
    Infeasible { residual: f64, tol: f64 },

    #[error("field format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
