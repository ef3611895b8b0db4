// Negated float comparisons like `!(x > 0.0)` are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod gradcheck;
pub mod models;
pub mod nn;
pub mod selftest;
pub mod tensor;
pub mod training;

pub use autodiff::{Activation, MatmulPrecision, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
