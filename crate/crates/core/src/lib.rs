//! Deterministic federated-learning simulator.
//!
//! The crate covers the whole pipeline: loading or generating a labeled
//! dataset ([`data`]), splitting it into non-IID clients ([`partition`]),
//! training with FedAvg, FedProx, RADFed or RADFed-IS ([`fedcore`], [`model`])
//! and measuring model divergence and task metrics ([`metrics`]). Every random
//! choice is drawn from a stream derived from a master seed ([`rng`]), so runs
//! are reproducible bit for bit regardless of the worker count ([`exec`]).

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod exec;
pub mod fedcore;
pub mod io;
pub mod metrics;
pub mod model;
pub mod partition;
pub mod rng;

pub use error::{Error, Result};
