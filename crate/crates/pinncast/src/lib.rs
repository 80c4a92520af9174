//! Continuous-depth transformer forecaster for gridded physical fields.
//!
//! The crate is organized around a small differentiable tensor core
//! ([`diffcore`]), an adaptive Runge-Kutta integrator that is differentiable
//! by unrolling ([`odesolve`]), a two-branch attention module ([`attention`]),
//! the full forecaster ([`model`]), latitude-weighted physics losses and
//! verification metrics ([`physics`]), a synthetic dataset with a bit-exact
//! on-disk format ([`data`]), and a training/evaluation CLI ([`cli`]).

// Validation uses `!(x > 0.0)` instead of `x <= 0.0` so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod data;
pub mod diffcore;
pub mod model;
pub mod odesolve;
pub mod params;
pub mod physics;
pub mod train;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shape mismatch; the message names both offending shapes.
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration (bad hyperparameter, missing variable, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Adaptive integration gave up before reaching the end of the interval.
    #[error("integration failure: {detail} (reached t = {t_reached}, {steps} steps)")]
    Integration {
        t_reached: f64,
        steps: usize,
        detail: String,
    },

    /// A computation produced NaN or infinite values.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Malformed manifest, checkpoint, or config file.
    #[error("format error: {0}")]
    Format(String),

    /// Byte blobs whose length disagrees with the declared layout.
    #[error("length error: {0}")]
    Length(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn write_file(path: &std::path::Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}
