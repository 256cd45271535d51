//! Finite-dimensional realizations of the quantum Hall adiabatic transport
//! problem: magnetic models, Fermi projections, the Kubo-Štreda trace,
//! driven evolution, the Nenciu expansion and locality diagnostics.

extern crate openblas_src;

pub mod error;
pub mod linalg;
pub mod model;
pub mod poly;
pub mod quadrature;
pub mod spectral;
pub mod kubo;
pub mod fit;
pub mod adiabatic;
pub mod nenciu;
pub mod diagnostics;
pub mod snapshot;

pub use error::{Error, Result};
