//! Neural minimizing-movement scheme for gradient flows in a discrete
//! Hilbert space, with a Gauss-Newton inner solver and convergence
//! diagnostics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod hilbert;
pub mod linalg;
pub mod mms;
pub mod network;
pub mod reference;
pub mod scalar;
pub mod solvers;
pub mod theory;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Grid = hilbert::SampleGrid<f64>;
pub type Function = hilbert::GridFunction<f64>;
pub type Model = network::MlpModel<f64>;
pub type Record = mms::MmsRecord<f64>;
pub type Constants = theory::TheoryConstants<f64>;

pub type Grid32 = hilbert::SampleGrid<f32>;
pub type Function32 = hilbert::GridFunction<f32>;
pub type Model32 = network::MlpModel<f32>;
pub type Record32 = mms::MmsRecord<f32>;
pub type Constants32 = theory::TheoryConstants<f32>;
