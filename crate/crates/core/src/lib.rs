//! Recurrent agents whose cells are conditioned on the previous action:
//! cell architectures, truncated backpropagation through time, replay with
//! stored states, GVF prediction, Q-learning control, partially observable
//! environments and an experiment harness.
//!
//! The guide in `book/` walks through each layer; its code samples run as
//! doctests.

pub mod autodiff;
pub mod cells;
pub mod control;
pub mod envs;
pub mod error;
pub mod harness;
mod learn;
pub mod optim;
pub mod prediction;
pub mod replay;
pub mod tensor_ops;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/cells.md")]
    mod cells {}
    #[doc = include_str!("../../../book/src/learning.md")]
    mod learning {}
    #[doc = include_str!("../../../book/src/environments.md")]
    mod environments {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
