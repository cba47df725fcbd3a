//! Finite-difference laboratory for the Hesse-Koszul flow of affine metrics on
//! flat tori.

pub mod diagnostics;
pub mod error;
pub mod fixtures;
pub mod flow;
pub mod gate;
pub mod geometry;
pub mod grid;
pub mod harness;
pub mod io;
pub mod lift;
pub mod linalg;
pub mod stencil;

pub use error::{Error, Result};
pub use grid::{GridSpec, ScalarField, SymTensorField, Tensor3Field, Tensor4Field, VectorField};
pub use linalg::Mat;
