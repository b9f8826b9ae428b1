//! Differentiation engine over a small closed set of vector primitives.
//!
//! A [`Program`] maps `(ParameterSet, input)` to an output vector. Reverse
//! mode is a numeric sweep over the node list; forward mode is a program
//! transformation ([`ProgramBuilder::inline_jvp`]) so that forward-over-forward
//! and reverse-over-forward compose without extra machinery.

mod archive;
mod eval;
mod fd;
mod forward;
mod params;
mod program;

pub use archive::{read_archive, write_archive, FORMAT_VERSION as ARCHIVE_FORMAT_VERSION};
pub use eval::{set_injected_fault, InjectedFault};
pub use fd::{finite_difference_gradient, max_relative_error, relative_error};
pub use params::{Group, ParamEntry, ParamId, ParamSubset, ParameterSet};
pub use program::{NodeId, Program, ProgramBuilder};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("shape mismatch in {primitive}: {detail}")]
    ShapeMismatch { primitive: &'static str, detail: String },
    #[error("non-differentiable point in {primitive}")]
    NonDifferentiable { primitive: &'static str },
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("archive: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Convenience free-function forms of the [`Program`] methods.
pub fn evaluate(program: &Program, params: &ParameterSet, input: &[f64]) -> Result<Vec<f64>, EngineError> {
    program.evaluate(params, input)
}

pub fn gradient(
    program: &Program,
    params: &ParameterSet,
    input: &[f64],
    cotangent: &[f64],
) -> Result<(ParameterSet, Vec<f64>), EngineError> {
    program.gradient(params, input, cotangent)
}

pub fn jvp(
    program: &Program,
    params: &ParameterSet,
    input: &[f64],
    tangent: &[f64],
) -> Result<Vec<f64>, EngineError> {
    program.jvp(params, input, tangent)
}

#[cfg(test)]
mod tests;
