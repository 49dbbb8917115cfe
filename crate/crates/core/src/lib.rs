//! Split-learning training of heterogeneous-attention graph neural networks
//! over vertically partitioned graphs.
//!
//! Parties are in-process logical actors. Every value that crosses a party
//! boundary is recorded in a transcript with its byte size, so communication
//! cost and privacy properties can be checked after the fact.

pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod models;
pub mod nn;
pub mod optim;
pub mod privacy;
pub mod protocol;
pub mod tensor;
pub mod transcript;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use gradcheck::finite_diff_check;
pub use nn::{ParamId, ParamSet};
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::Tensor;
