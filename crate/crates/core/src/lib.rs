// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod checkpoint;
pub mod cost_volume;
pub mod dataset;
pub mod depth;
pub mod error;
pub mod features;
pub mod fmt;
pub mod fusion;
pub mod geometry;
pub mod gradsuite;
pub mod image;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{ConvOptions, Mask, Tape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
